//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WFN1"
//! u32 entry count
//! per entry:  u32 name length, name (UTF-8), u8 dtype (0 = f32), u32 rank, rank × u64 dims
//! u32 alias count
//! per alias:  u32 length, logical name, u32 length, physical name
//! payloads:   every entry's f32 values in entry order
//! ```
//!
//! Only physical tensors are stored, so a tied tensor is written once. The
//! model configuration lives next to the checkpoint in `<path>.config.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::config::ModelConfig;
use super::store::ParamStore;
use super::transformer::TransformerModel;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"WFN1";
const DTYPE_F32: u8 = 0;
const MAX_RANK: u32 = 8;

/// Name and shape of one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl CensusEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Header of a checkpoint: tensor census and alias table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub entries: Vec<CensusEntry>,
    pub aliases: BTreeMap<String, String>,
}

impl CheckpointHeader {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.numel() as u64).sum()
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(Error::Format(format!("name length {n} is implausible")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format("name is not UTF-8".into()))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

/// Serializes `store`; identical stores produce identical bytes.
pub fn write_checkpoint<W: Write>(store: &ParamStore, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        write_str(w, name)?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    w.write_all(&(store.aliases().len() as u32).to_le_bytes())?;
    for (logical, physical) in store.aliases() {
        write_str(w, logical)?;
        write_str(w, physical)?;
    }
    for (_, t) in store.iter() {
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Parses the header only.
pub fn read_header<R: Read>(r: &mut R) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let count = read_u32(r)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name = read_str(r)?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype).map_err(truncated)?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Format(format!("{name}: unsupported dtype {}", dtype[0])));
        }
        let rank = read_u32(r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("{name}: unsupported rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        entries.push(CensusEntry { name, shape });
    }
    let alias_count = read_u32(r)?;
    let mut aliases = BTreeMap::new();
    for _ in 0..alias_count {
        let logical = read_str(r)?;
        let physical = read_str(r)?;
        aliases.insert(logical, physical);
    }
    Ok(CheckpointHeader { entries, aliases })
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamStore> {
    let header = read_header(r)?;
    let mut tensors = IndexMap::with_capacity(header.entries.len());
    for e in header.entries {
        let mut bytes = vec![0u8; e.numel() * 4];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Format(format!("{}: {err}", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", e.name)));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payloads".into()));
    }
    ParamStore::from_parts(tensors, header.aliases)
}

/// `<path>.config.json`
pub fn config_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Writes the checkpoint at `path` and the configuration beside it.
pub fn save_model(model: &TransformerModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model.params(), &mut w)?;
    w.flush()?;
    let json = serde_json::to_string_pretty(model.config())
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    std::fs::write(config_path(path), json)?;
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(config_path(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("config sidecar: {e}")))
}

/// Reads a checkpoint and its configuration and checks they agree.
pub fn load_model(path: &Path) -> Result<TransformerModel> {
    let config = load_config(path)?;
    let store = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
    TransformerModel::from_parts(config, store)
}

/// Exact byte size of a checkpoint for `store`.
pub fn checkpoint_size(store: &ParamStore) -> u64 {
    let mut n = 4 + 4 + 4u64;
    for (name, t) in store.iter() {
        n += 4 + name.len() as u64 + 1 + 4 + 8 * t.shape().len() as u64 + 4 * t.numel() as u64;
    }
    for (a, b) in store.aliases() {
        n += 8 + (a.len() + b.len()) as u64;
    }
    n
}
