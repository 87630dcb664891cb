//! Binary checkpoint: everything needed to rebuild a [`Model`] next to the
//! template mesh it was trained on.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "GAVA" | version u32 | header_len u32 | header JSON
//! template SHA-256 (32 bytes)
//! section count u32
//! per section: name_len u16, name, offset u64, byte_len u64, rank u32, dims u64 x rank
//! data block: f64 values, each section at its offset
//! ```
//!
//! The header carries the training config and [`ModelMeta`]. Sections are the
//! network parameters (`param:<name>`) and the mesh sampling operators
//! (`hierarchy:<level>:down|up` as `[nnz, 3]` row/column/value triplets),
//! which are checked against a rebuild from the template on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::template_hash;
use super::model::{hex, Model, ModelMeta};
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::tensor::{Real, SparseMatrix, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"GAVA";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    meta: ModelMeta,
    /// `(rows, cols)` of each level's down and up operators.
    hierarchy: Vec<[[usize; 2]; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub meta: ModelMeta,
    pub template_hash: [u8; 32],
    hierarchy: Vec<[[usize; 2]; 2]>,
    pub sections: Vec<Section>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn triplet_section(name: String, m: &SparseMatrix) -> Section {
    let t = m.triplets();
    let data = t.iter().flat_map(|&(r, c, v)| [r as f64, c as f64, v as f64]).collect();
    Section { name, shape: vec![t.len(), 3], data }
}

fn section_matrix(s: &Section, dims: [usize; 2]) -> Result<SparseMatrix> {
    if s.shape.len() != 2 || s.shape[1] != 3 {
        return Err(fmt_err(format!("section {} is not a triplet list", s.name)));
    }
    let t: Vec<(usize, usize, Real)> =
        s.data.chunks(3).map(|c| (c[0] as usize, c[1] as usize, c[2] as Real)).collect();
    if t.iter().any(|&(r, c, _)| r >= dims[0] || c >= dims[1]) {
        return Err(fmt_err(format!("section {} indexes outside {dims:?}", s.name)));
    }
    Ok(SparseMatrix::from_triplets(dims[0], dims[1], &t))
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut sections: Vec<Section> = model
            .store
            .iter()
            .map(|(_, name, t)| Section {
                name: format!("param:{name}"),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f64).collect(),
            })
            .collect();
        let mut hierarchy = Vec::new();
        for (l, lev) in model.hierarchy.levels.iter().enumerate() {
            sections.push(triplet_section(format!("hierarchy:{}:down", l + 1), &lev.down));
            sections.push(triplet_section(format!("hierarchy:{}:up", l + 1), &lev.up));
            hierarchy.push([[lev.down.rows(), lev.down.cols()], [lev.up.rows(), lev.up.cols()]]);
        }
        Self {
            config: model.config.clone(),
            meta: model.meta.clone(),
            template_hash: template_hash(&model.template),
            hierarchy,
            sections,
        }
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header { config: self.config.clone(), meta: self.meta.clone(), hierarchy: self.hierarchy.clone() };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.template_hash);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            let len = 8 * s.data.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            offset += len;
        }
        for s in &self.sections {
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(fmt_err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Version { found: version, expected: CKPT_VERSION });
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| fmt_err(format!("bad header: {e}")))?;
        let mut hash = [0u8; 32];
        hash.copy_from_slice(r.take(32)?);
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| fmt_err("section name is not UTF-8"))?.to_string();
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(fmt_err(format!("section {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt_err("shape overflow"))?;
            if n.checked_mul(8) != Some(len) {
                return Err(fmt_err(format!("section {name}: {len} bytes for shape {shape:?}")));
            }
            table.push((name, offset, len, shape));
        }
        let data = &bytes[r.pos..];
        let mut sections = Vec::with_capacity(table.len());
        for (name, offset, len, shape) in table {
            let end = offset.checked_add(len).filter(|&e| e <= data.len()).ok_or_else(|| fmt_err(format!("section {name} truncated")))?;
            let vals = data[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            sections.push(Section { name, shape, data: vals });
        }
        if hex(&hash) != header.meta.template_hash {
            return Err(fmt_err("template hash in header and trailer disagree"));
        }
        Ok(Self { config: header.config, meta: header.meta, template_hash: hash, hierarchy: header.hierarchy, sections })
    }

    /// Writes the checkpoint and returns its size in bytes.
    pub fn save(&self, path: &Path) -> Result<u64> {
        let b = self.to_bytes();
        std::fs::write(path, &b)?;
        Ok(b.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model on `template`, which must be the mesh it was trained on.
    pub fn into_model(&self, template: &TriMesh) -> Result<Model> {
        if template_hash(template) != self.template_hash {
            return Err(Error::Data("template mesh does not match the checkpoint".into()));
        }
        let mut model = Model::new(&self.config, template, self.meta.expr_dim, self.meta.intrinsics)?;
        if model.meta != self.meta {
            return Err(fmt_err("checkpoint metadata disagrees with the rebuilt model"));
        }
        let ids: Vec<_> = model.store.ids().collect();
        let mut used = 0;
        for id in ids {
            let name = format!("param:{}", model.store.name(id));
            let s = self.section(&name).ok_or_else(|| fmt_err(format!("missing section {name}")))?;
            let dst = model.store.get_mut(id);
            if s.shape != dst.shape() {
                return Err(fmt_err(format!("section {name} has shape {:?}, model expects {:?}", s.shape, dst.shape())));
            }
            *dst = Tensor::new(s.shape.clone(), s.data.iter().map(|&v| v as Real).collect())?;
            used += 1;
        }
        if self.hierarchy.len() != model.hierarchy.levels.len() {
            return Err(fmt_err("hierarchy depth differs from the config"));
        }
        for (l, (lev, dims)) in model.hierarchy.levels.iter().zip(&self.hierarchy).enumerate() {
            for (kind, m, d) in [("down", &lev.down, dims[0]), ("up", &lev.up, dims[1])] {
                let name = format!("hierarchy:{}:{kind}", l + 1);
                let s = self.section(&name).ok_or_else(|| fmt_err(format!("missing section {name}")))?;
                if section_matrix(s, d)? != **m {
                    return Err(fmt_err(format!("{name} differs from the operator rebuilt from the template")));
                }
                used += 1;
            }
        }
        if used != self.sections.len() {
            return Err(fmt_err(format!("{} unexpected sections", self.sections.len() - used)));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| fmt_err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Serializes `model` to `path`, returning the byte count.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<u64> {
    Checkpoint::from_model(model).save(path)
}

/// Loads a checkpoint and rebuilds its model on `template`.
pub fn load_checkpoint(path: &Path, template: &TriMesh) -> Result<Model> {
    Checkpoint::load(path)?.into_model(template)
}
