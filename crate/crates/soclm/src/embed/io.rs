//! Embedding persistence: the SOCLM-EMB1 binary dump and a TSV debug export.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};

const EMB_MAGIC: &str = "SOCLM-EMB1";

/// Id-keyed embedding rows, the interchange between pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedEmbeddings {
    pub dim: usize,
    pub ids: Vec<String>,
    /// Row-major `ids.len() × dim`.
    pub data: Vec<f64>,
}

impl NamedEmbeddings {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f64>) -> Result<NamedEmbeddings> {
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        Ok(NamedEmbeddings { dim, ids, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Index lookup by id; O(n) per call — build `id_index` for bulk use.
    pub fn find(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|x| x == id).map(|i| self.row(i))
    }

    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }
}

/// Binary dump: magic, u32 count, u32 dim, id table, then f32 rows.
pub fn save_embeddings(emb: &NamedEmbeddings, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    binio::write_magic(&mut w, path, EMB_MAGIC)?;
    binio::write_u32(&mut w, path, emb.ids.len() as u32)?;
    binio::write_u32(&mut w, path, emb.dim as u32)?;
    for id in &emb.ids {
        binio::write_str(&mut w, path, id)?;
    }
    for i in 0..emb.ids.len() {
        binio::write_f32_row(&mut w, path, emb.row(i))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<NamedEmbeddings> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    binio::read_magic(&mut r, path, EMB_MAGIC)?;
    let count = binio::read_u32(&mut r, path)? as usize;
    let dim = binio::read_u32(&mut r, path)? as usize;
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(binio::read_str(&mut r, path)?);
    }
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        data.extend(binio::read_f32_row(&mut r, path, dim)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "trailing bytes after last row".into(),
        });
    }
    NamedEmbeddings::new(dim, ids, data)
}

/// Debug export: `id \t v0 \t v1 ...` with 6 decimals.
pub fn export_tsv(emb: &NamedEmbeddings, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (i, id) in emb.ids.iter().enumerate() {
        write!(w, "{id}").map_err(|e| Error::io(path, e))?;
        for v in emb.row(i) {
            write!(w, "\t{v:.6}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
