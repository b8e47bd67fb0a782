//! On-disk formats for the ANN index and the mined-pair file.
//!
//! Index layout (little-endian, magic `SOCLM-IDX1`): mode byte, counts
//! (n, dim, n_list, m, k_codes), coarse centroids as f64, the inverted
//! lists, then mode-specific payload — raw normalized vectors (exact) or
//! PQ codebooks plus per-row codes (quantized). f64 storage keeps
//! `load(save(index))` lossless so reruns stay bit-identical.
//!
//! Pair file: TSV `tweet_i<TAB>tweet_j<TAB>cosine_distance`, distances with
//! 6-decimal fixed formatting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{read_f64_row, read_magic, read_u32, write_f64_row, write_magic, write_u32};
use crate::error::{Error, Result};
use crate::index::{IndexMode, PQCodebooks, PQIndex, SimilarPairSet};

pub const INDEX_MAGIC: &str = "SOCLM-IDX1";

pub fn save_index(index: &PQIndex, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_magic(&mut w, path, INDEX_MAGIC)?;
    let mode = match index.mode {
        IndexMode::Exact => 0,
        IndexMode::Quantized => 1,
    };
    write_u32(&mut w, path, mode)?;
    write_u32(&mut w, path, index.n as u32)?;
    write_u32(&mut w, path, index.dim as u32)?;
    write_u32(&mut w, path, index.n_list as u32)?;
    let (m, k_codes) = match &index.books {
        Some(b) => (b.m, b.k_codes),
        None => (0, 0),
    };
    write_u32(&mut w, path, m as u32)?;
    write_u32(&mut w, path, k_codes as u32)?;
    write_f64_row(&mut w, path, &index.coarse)?;
    for list in &index.lists {
        write_u32(&mut w, path, list.len() as u32)?;
        for &i in list {
            write_u32(&mut w, path, i)?;
        }
    }
    match index.mode {
        IndexMode::Exact => write_f64_row(&mut w, path, &index.raw)?,
        IndexMode::Quantized => {
            let books = index.books.as_ref().expect("quantized index has codebooks");
            for s in 0..books.m {
                write_f64_row(&mut w, path, &books.codebooks[s])?;
            }
            for code in &index.codes {
                for &c in code {
                    write_u32(&mut w, path, u32::from(c))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<PQIndex> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    read_magic(&mut r, path, INDEX_MAGIC)?;
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let mode = match read_u32(&mut r, path)? {
        0 => IndexMode::Exact,
        1 => IndexMode::Quantized,
        other => return Err(fmt(&format!("unknown index mode {other}"))),
    };
    let n = read_u32(&mut r, path)? as usize;
    let dim = read_u32(&mut r, path)? as usize;
    let n_list = read_u32(&mut r, path)? as usize;
    let m = read_u32(&mut r, path)? as usize;
    let k_codes = read_u32(&mut r, path)? as usize;
    if dim == 0 || n_list == 0 {
        return Err(fmt("zero dimension or list count"));
    }
    let coarse = read_f64_row(&mut r, path, n_list * dim)?;
    let mut lists = Vec::with_capacity(n_list);
    let mut seen = 0usize;
    for _ in 0..n_list {
        let len = read_u32(&mut r, path)? as usize;
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            let i = read_u32(&mut r, path)?;
            if i as usize >= n {
                return Err(fmt(&format!("list entry {i} out of range (n = {n})")));
            }
            list.push(i);
        }
        seen += len;
        lists.push(list);
    }
    if seen != n {
        return Err(fmt(&format!("lists hold {seen} entries, expected {n}")));
    }
    let index = match mode {
        IndexMode::Exact => PQIndex {
            dim,
            n,
            mode,
            coarse,
            n_list,
            lists,
            codes: Vec::new(),
            books: None,
            raw: read_f64_row(&mut r, path, n * dim)?,
        },
        IndexMode::Quantized => {
            if m == 0 || dim % m != 0 || k_codes == 0 {
                return Err(fmt(&format!("invalid PQ shape m {m}, k_codes {k_codes}")));
            }
            let sub = dim / m;
            let mut codebooks = Vec::with_capacity(m);
            for _ in 0..m {
                codebooks.push(read_f64_row(&mut r, path, k_codes * sub)?);
            }
            let mut codes = Vec::with_capacity(n);
            for _ in 0..n {
                let mut code = Vec::with_capacity(m);
                for _ in 0..m {
                    let c = read_u32(&mut r, path)?;
                    if c as usize >= k_codes {
                        return Err(fmt(&format!("code {c} out of range (k_codes {k_codes})")));
                    }
                    code.push(c as u16);
                }
                codes.push(code);
            }
            PQIndex {
                dim,
                n,
                mode,
                coarse,
                n_list,
                lists,
                codes,
                books: Some(PQCodebooks {
                    dim,
                    m,
                    k_codes,
                    codebooks,
                }),
                raw: Vec::new(),
            }
        }
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(fmt("trailing bytes after index payload"));
    }
    Ok(index)
}

/// Writes mined pairs as TSV, mapping row indices to the given tweet ids.
pub fn save_pairs(pairs: &SimilarPairSet, ids: &[String], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for &(a, b, d) in pairs.pairs() {
        let (a, b) = (a as usize, b as usize);
        if a >= ids.len() || b >= ids.len() {
            return Err(Error::InvalidInput(format!(
                "pair ({a}, {b}) outside id table of {} tweets",
                ids.len()
            )));
        }
        writeln!(w, "{}\t{}\t{:.6}", ids[a], ids[b], d).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a pair TSV back as (tweet_i, tweet_j, cosine_distance) rows.
pub fn load_pairs(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (a, b, d) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(d), None) if !a.is_empty() && !b.is_empty() => (a, b, d),
            _ => {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    "expected tweet_i<TAB>tweet_j<TAB>distance",
                ))
            }
        };
        let d: f64 = d
            .parse()
            .map_err(|_| Error::parse(path, lineno + 1, "distance is not a number"))?;
        if !(0.0..=2.0).contains(&d) {
            return Err(Error::parse(
                path,
                lineno + 1,
                "cosine distance outside [0, 2]",
            ));
        }
        out.push((a.to_string(), b.to_string(), d));
    }
    Ok(out)
}
