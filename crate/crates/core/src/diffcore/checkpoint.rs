//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "PLCK"
//! version      u32      1
//! header_len   u32      length of the UTF-8 header that follows
//! header       bytes    free-form "key=value" lines (model architecture)
//! n_groups     u32
//! per group:
//!   name_len   u32, name bytes
//!   n_params   u32
//!   per param:
//!     name_len u32, name bytes
//!     flags    u8       bit 0 = trainable
//!     ndim     u32, dims u64 * ndim
//!     step     u64      Adam step count
//!     lr_scale f64
//!     value    f64 * numel
//!     m        f64 * numel   Adam first moment
//!     v        f64 * numel   Adam second moment
//! ```

use std::io::{Read, Write};

use super::params::{Param, ParamRegistry};
use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PLCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: String,
    pub groups: Vec<(String, ParamRegistry)>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(format!("bad utf-8: {e}")))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut b = vec![0u8; n * 8];
    r.read_exact(&mut b)?;
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_str(w, &self.header)?;
        put_u32(w, self.groups.len() as u32)?;
        for (name, reg) in &self.groups {
            put_str(w, name)?;
            put_u32(w, reg.len() as u32)?;
            for p in reg.params() {
                put_str(w, &p.name)?;
                w.write_all(&[u8::from(p.trainable)])?;
                put_u32(w, p.value.ndim() as u32)?;
                for &d in p.value.shape() {
                    put_u64(w, d as u64)?;
                }
                put_u64(w, p.step)?;
                put_f64s(w, &[p.lr_scale])?;
                put_f64s(w, p.value.data())?;
                put_f64s(w, &p.m)?;
                put_f64s(w, &p.v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header = get_str(r)?;
        let n_groups = get_u32(r)?;
        let mut groups = Vec::new();
        for _ in 0..n_groups {
            let name = get_str(r)?;
            let n = get_u32(r)?;
            let mut params = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let pname = get_str(r)?;
                let flags = get_u8(r)?;
                let ndim = get_u32(r)?;
                let shape = (0..ndim).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let numel: usize = shape.iter().product();
                let step = get_u64(r)?;
                let lr_scale = get_f64s(r, 1)?[0];
                let value = Tensor::new(&shape, get_f64s(r, numel)?)?;
                let m = get_f64s(r, numel)?;
                let v = get_f64s(r, numel)?;
                params.push(Param {
                    name: pname,
                    grad: vec![0.0; numel],
                    value,
                    m,
                    v,
                    step,
                    trainable: flags & 1 == 1,
                    lr_scale,
                });
            }
            groups.push((name, ParamRegistry::from_params(params)?));
        }
        Ok(Checkpoint { header, groups })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn group(&self, name: &str) -> Option<&ParamRegistry> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}
