//! Uncompressed columnar point-cloud dump, used to measure what storing every
//! frame's Gaussians would cost.
//!
//! Layout (little-endian): magic `GSPC`, version `u32`, count `u64`,
//! attribute count `u32`, then per attribute a `u32`-length-prefixed UTF-8
//! name and a `u32` width, then each attribute's `count * width` `f32`
//! values column by column.

use std::io::{Read, Write};

use super::GaussianCloud;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const RAW_MAGIC: &[u8; 4] = b"GSPC";
pub const RAW_VERSION: u32 = 1;

fn columns(c: &GaussianCloud) -> Vec<(&'static str, &Tensor)> {
    let mut v = vec![
        ("center", &c.centers),
        ("rotation", &c.rotations),
        ("scale", &c.scales),
        ("color", &c.colors),
        ("opacity", &c.opacities),
    ];
    if let Some(f) = &c.features {
        v.push(("feature", f));
    }
    v
}

pub fn write_raw_cloud<W: Write>(cloud: &GaussianCloud, mut w: W) -> Result<u64> {
    let cols = columns(cloud);
    let mut buf = Vec::new();
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&RAW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(cols.len() as u32).to_le_bytes());
    for (name, t) in &cols {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape()[1] as u32).to_le_bytes());
    }
    for (_, t) in &cols {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(buf.len() as u64)
}

/// Size in bytes `write_raw_cloud` would produce.
pub fn raw_cloud_bytes(cloud: &GaussianCloud) -> u64 {
    let cols = columns(cloud);
    let header: usize = 20 + cols.iter().map(|(n, _)| 8 + n.len()).sum::<usize>();
    let body: usize = cols.iter().map(|(_, t)| t.len() * 4).sum();
    (header + body) as u64
}

pub fn read_raw_cloud<R: Read>(mut r: R) -> Result<GaussianCloud> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { b: &bytes, pos: 0 };
    if cur.take(4)? != RAW_MAGIC {
        return Err(Error::Format("not a GSPC cloud".into()));
    }
    let version = cur.u32()?;
    if version != RAW_VERSION {
        return Err(Error::Version { found: version, expected: RAW_VERSION });
    }
    let count = cur.u64()? as usize;
    let nattr = cur.u32()? as usize;
    let mut table = Vec::with_capacity(nattr);
    for _ in 0..nattr {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        table.push((name, cur.u32()? as usize));
    }
    let mut get = std::collections::HashMap::new();
    for (name, width) in table {
        let raw = cur.take(count * width * 4)?;
        let data: Vec<Real> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
            .collect();
        get.insert(name, Tensor::new(vec![count, width], data)?);
    }
    let mut need = |n: &str| get.remove(n).ok_or_else(|| Error::Format(format!("missing attribute {n}")));
    Ok(GaussianCloud {
        centers: need("center")?,
        rotations: need("rotation")?,
        scales: need("scale")?,
        colors: need("color")?,
        opacities: need("opacity")?,
        features: get.remove("feature"),
    })
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Format("truncated GSPC file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
