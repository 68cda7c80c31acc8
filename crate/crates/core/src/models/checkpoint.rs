//! Binary model container.
//!
//! ```text
//! magic      8 bytes  "VARNETCK"
//! version    u32 LE
//! desc_len   u64 LE, then desc_len bytes of JSON {architecture, method}
//! members    u64 LE
//! per member: tensors u64 LE
//!   per tensor: rank u64 LE, rank x dim u64 LE, data f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::architecture::Architecture;
use super::method::MethodConfig;
use super::network::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VARNETCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    architecture: Architecture,
    method: MethodConfig,
}

fn parse_err(field: &'static str, message: impl Into<String>) -> Error {
    Error::Parse { field, message: message.into() }
}

impl Model {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let desc = serde_json::to_vec(&Descriptor {
            architecture: self.architecture().clone(),
            method: *self.method(),
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(desc.len() as u64).to_le_bytes())?;
        w.write_all(&desc)?;
        w.write_all(&(self.member_count() as u64).to_le_bytes())?;
        for member in self.members() {
            w.write_all(&(member.len() as u64).to_le_bytes())?;
            for t in member {
                w.write_all(&(t.rank() as u64).to_le_bytes())?;
                for &d in t.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                let mut buf = Vec::with_capacity(t.len() * 8);
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(parse_err("magic", "not a model checkpoint"));
        }
        let mut v = [0u8; 4];
        read_exact(&mut r, &mut v, "version")?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(parse_err("version", format!("unsupported version {version}")));
        }
        let len = read_u64(&mut r, "descriptor")? as usize;
        let mut desc = vec![0u8; len.min(1 << 24)];
        if desc.len() != len {
            return Err(parse_err("descriptor", "descriptor too large"));
        }
        read_exact(&mut r, &mut desc, "descriptor")?;
        let desc: Descriptor =
            serde_json::from_slice(&desc).map_err(|e| parse_err("descriptor", e.to_string()))?;
        let members = read_u64(&mut r, "members")?;
        let mut all = Vec::new();
        for _ in 0..members {
            let count = read_u64(&mut r, "tensors")?;
            let mut tensors = Vec::new();
            for _ in 0..count {
                let rank = read_u64(&mut r, "rank")?;
                if rank > 8 {
                    return Err(parse_err("rank", format!("implausible rank {rank}")));
                }
                let shape = (0..rank)
                    .map(|_| read_u64(&mut r, "dims").map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .filter(|&n| n <= 1 << 32)
                    .ok_or_else(|| parse_err("dims", "tensor too large"))?;
                let mut bytes = vec![0u8; n * 8];
                read_exact(&mut r, &mut bytes, "payload")?;
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                tensors.push(Tensor::new(shape, data).map_err(|e| parse_err("payload", e.to_string()))?);
            }
            all.push(tensors);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(parse_err("payload", "trailing bytes after last tensor"));
        }
        Model::from_members(desc.architecture, desc.method, all)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], field: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => parse_err(field, "truncated"),
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R, field: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, field)?;
    Ok(u64::from_le_bytes(b))
}
