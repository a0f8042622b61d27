//! `TEGU` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TEGU"            4 bytes
//! version           u32 (= 1)
//! header length     u64, then that many bytes of JSON:
//!                   {"component": "backbone" | "projector", "config": {...}}
//! per parameter     u32 name length, UTF-8 name,
//!                   u32 rank, rank x u64 extents,
//!                   prod(extents) x f32 values
//! ```
//!
//! Parameters run to end of file. Values are stored as `f32`, so a load
//! reproduces every array after 32-bit quantization.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, ParamTensors};

use super::{BackboneParams, ModelConfig};

pub const MAGIC: [u8; 4] = *b"TEGU";
pub const VERSION: u32 = 1;

pub const BACKBONE_COMPONENT: &str = "backbone";
pub const PROJECTOR_COMPONENT: &str = "projector";

#[derive(Serialize, Deserialize)]
struct Header<C> {
    component: String,
    config: C,
}

/// Decoded container contents.
#[derive(Debug)]
pub struct Container {
    pub component: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, DenseArray)>,
}

pub fn encode<C: Serialize>(
    component: &str,
    config: &C,
    tensors: &[(String, &DenseArray)],
) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        component: component.to_string(),
        config,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                what: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = r.u64("header length")?;
    let header_len = usize::try_from(header_len)
        .map_err(|_| Error::Checkpoint(format!("header length {header_len} too large")))?;
    let header: Header<serde_json::Value> =
        serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut tensors = Vec::new();
    while !r.at_end() {
        let name_len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64(&format!("extents of {name}"))? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(
            count.checked_mul(4).ok_or_else(|| Error::Checkpoint("extent overflow".into()))?,
            &format!("values of {name}"),
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, DenseArray::from_vec(&shape, data)?));
    }
    Ok(Container {
        component: header.component,
        config: header.config,
        tensors,
    })
}

pub fn write_file<C: Serialize>(
    path: &Path,
    component: &str,
    config: &C,
    tensors: &[(String, &DenseArray)],
) -> Result<()> {
    let bytes = encode(component, config, tensors)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl Container {
    pub fn expect_component(&self, component: &str) -> Result<()> {
        if self.component != component {
            return Err(Error::Checkpoint(format!(
                "expected a {component} checkpoint, found {}",
                self.component
            )));
        }
        Ok(())
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))
    }

    /// Copies stored arrays into `params`, which must have the same names and
    /// shapes in the same order.
    pub fn fill<P: ParamTensors>(self, params: &mut P) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if self.tensors.len() < expected.len() {
            return Err(Error::Truncated {
                what: format!("parameter {}", expected[self.tensors.len()].0),
            });
        }
        if self.tensors.len() > expected.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter {}",
                self.tensors[expected.len()].0
            )));
        }
        for ((name, shape), (found, t)) in expected.iter().zip(&self.tensors) {
            if name != found || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {found} {:?}",
                    t.shape()
                )));
            }
        }
        for (dst, (_, src)) in params.tensors_mut().into_iter().zip(self.tensors) {
            *dst = src;
        }
        Ok(())
    }
}

/// Writes a backbone checkpoint.
pub fn save_backbone(params: &BackboneParams, path: &Path) -> Result<()> {
    write_file(
        path,
        BACKBONE_COMPONENT,
        &params.config,
        &params.named_tensors(),
    )
}

pub fn load_backbone(path: &Path) -> Result<BackboneParams> {
    backbone_from_container(read_file(path)?)
}

pub fn backbone_from_container(c: Container) -> Result<BackboneParams> {
    c.expect_component(BACKBONE_COMPONENT)?;
    let config: ModelConfig = c.config()?;
    let mut params = BackboneParams::init(&config)?;
    c.fill(&mut params)?;
    Ok(params)
}
