//! Binary checkpoint:
//!
//! ```text
//! "MFEN" | version u32 | config_len u32 | config (key = value text)
//! | param_count u32 | per parameter:
//!     name_len u32 | name | rank u32 | dims u32 * rank | f32 * numel
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::config::{arch_from_text, arch_to_text};
use crate::engine::{ParamStore, ParamTensor};
use crate::error::{Error, Result};
use crate::model::{check_params, Model, ModelGraph};

pub const MAGIC: &[u8; 4] = b"MFEN";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits u32").to_le_bytes());
}

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = arch_to_text(model.graph().arch());
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, model.params().len());
    for p in model.params().iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len());
        p.shape.iter().for_each(|&d| put_u32(&mut out, d));
        p.value.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated { what: what.to_string() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// The stored architecture text and parameters, unchecked against any graph.
pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("format version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("config length")?;
    let config = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| Error::Config("checkpoint config block is not UTF-8".into()))?
        .to_string();
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u32(&format!("name length of parameter #{i}"))?;
        let name = String::from_utf8_lossy(r.take(len, &format!("name of parameter #{i}"))?).into_owned();
        let rank = r.u32(&format!("rank of `{name}`"))?;
        let shape = (0..rank)
            .map(|_| r.u32(&format!("shape of `{name}`")))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, &format!("payload of `{name}`"))?;
        let value = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.insert(ParamTensor::new(name, shape, value)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((config, store))
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<(String, ParamStore<f32>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Rebuild the stored architecture and its parameters.
pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let (config, params) = read(path)?;
    let graph = ModelGraph::build(&arch_from_text(&config)?)?;
    Model::from_parts(graph, params)
}

/// Load parameters into a caller-chosen graph; rejects the first parameter
/// whose name or shape differs.
pub fn load_into(path: &Path, graph: ModelGraph) -> Result<Model<f32>> {
    let (_, params) = read(path)?;
    check_params(&graph, params.iter())?;
    Model::from_parts(graph, params)
}
