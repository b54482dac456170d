//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "AUALCKPT" | u32 version | u32 config length | network config as TOML
//! | u32 parameter count | per parameter: u32 name length, name, u32 rank, u64 dims, f32 values
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{NetConfig, Network};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AUALCKPT";
const VERSION: u32 = 1;

pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let config = toml::to_string(&net.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(net.store.len() as u32).to_le_bytes());
    for (_, p) in net.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, net: &Network) -> Result<()> {
    fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0; n];
        self.cur
            .read_exact(&mut b)
            .map_err(|_| Error::Data("checkpoint is truncated".into()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

/// Rebuilds the network from its stored config and loads every stored parameter.
pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config: NetConfig =
        toml::from_str(&r.string()?).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let mut net = Network::build(config)?;
    let count = r.u32()?;
    if count != net.store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {count} parameters, network expects {}",
            net.store.len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(4 * n)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let id = net
            .store
            .id(&name)
            .ok_or_else(|| Error::Data(format!("unknown parameter '{name}' in checkpoint")))?;
        net.store.set_value(id, Tensor::new(&shape, values)?)?;
    }
    Ok(net)
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
