//! On-disk formats for the encoder: checkpoints and vocabulary files.
//!
//! Checkpoint layout: the magic string, the eight architecture fields as
//! little-endian `u32`s, then every parameter tensor in canonical order as
//! (name, rank, dims..., f32 data). Parameters are held in `f64` in memory
//! and rounded to `f32` on disk, so `save(load(save(p)))` is byte-stable.
//!
//! Vocabulary files are plain text, one token per line, line number = id;
//! the five reserved tokens must occupy the first five lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{read_f32_row, read_magic, read_str, read_u32, write_f32_row, write_magic, write_str, write_u32};
use crate::error::{Error, Result};

use super::{EncoderConfig, EncoderParams, Tokenizer, RESERVED_TOKENS};

/// Magic header of encoder checkpoint files.
pub const CKPT_MAGIC: &str = "SOCLM-CKPT1";

/// Writes a checkpoint; see the module docs for the layout.
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    params.validate_finite()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_magic(&mut w, path, CKPT_MAGIC)?;
    let cfg = params.config();
    for v in [
        cfg.layers,
        cfg.d_model,
        cfg.heads,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_positions,
        cfg.projection[0],
        cfg.projection[1],
    ] {
        write_u32(&mut w, path, v as u32)?;
    }
    write_u32(&mut w, path, params.layout().len() as u32)?;
    for spec in params.layout() {
        write_str(&mut w, path, &spec.name)?;
        write_u32(&mut w, path, spec.shape.len() as u32)?;
        for &dim in &spec.shape {
            write_u32(&mut w, path, dim as u32)?;
        }
        let data = params
            .tensor(&spec.name)
            .expect("layout names resolve against their own params");
        write_f32_row(&mut w, path, data)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by `save_checkpoint`, validating the magic,
/// the architecture block, every tensor name and shape, and that no bytes
/// trail the last tensor.
pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_magic(&mut r, path, CKPT_MAGIC)?;
    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = read_u32(&mut r, path)? as usize;
    }
    let cfg = EncoderConfig {
        layers: fields[0],
        d_model: fields[1],
        heads: fields[2],
        d_ff: fields[3],
        vocab_size: fields[4],
        max_positions: fields[5],
        projection: [fields[6], fields[7]],
    };
    cfg.validate()
        .map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })?;
    let mut params = EncoderParams::zeros(&cfg)?;
    let n_tensors = read_u32(&mut r, path)? as usize;
    if n_tensors != params.layout().len() {
        return Err(Error::Format {
            path: path.into(),
            msg: format!(
                "expected {} tensors, file declares {n_tensors}",
                params.layout().len()
            ),
        });
    }
    for i in 0..n_tensors {
        let spec = params.layout()[i].clone();
        let name = read_str(&mut r, path)?;
        if name != spec.name {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("tensor {i} is {name:?}, expected {:?}", spec.name),
            });
        }
        let rank = read_u32(&mut r, path)? as usize;
        if rank != spec.shape.len() {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("tensor {name:?} has rank {rank}, expected {}", spec.shape.len()),
            });
        }
        for &want in &spec.shape {
            let got = read_u32(&mut r, path)? as usize;
            if got != want {
                return Err(Error::Format {
                    path: path.into(),
                    msg: format!("tensor {name:?} dimension {got} != expected {want}"),
                });
            }
        }
        let row = read_f32_row(&mut r, path, spec.len())?;
        params.data_mut()[spec.offset..spec.offset + spec.len()].copy_from_slice(&row);
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Format {
                path: path.into(),
                msg: "trailing bytes after final tensor".into(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    params.validate_finite()?;
    Ok(params)
}

/// Writes the vocabulary, one token per line in id order.
pub fn save_vocab(tok: &Tokenizer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for id in 0..tok.vocab_size() {
        let token = tok.token(id as u32).expect("contiguous ids");
        writeln!(w, "{token}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a vocabulary file; the first five lines must be the reserved tokens.
pub fn load_vocab(path: &Path, max_len: usize) -> Result<Tokenizer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            return Err(Error::parse(path, i + 1, "empty vocabulary line"));
        }
        lines.push(line);
    }
    if lines.len() < RESERVED_TOKENS.len() {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("vocabulary has fewer than {} lines", RESERVED_TOKENS.len()),
        });
    }
    for (i, want) in RESERVED_TOKENS.iter().enumerate() {
        if lines[i] != *want {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected reserved token {want:?}, found {:?}", lines[i]),
            ));
        }
    }
    Tokenizer::new(&lines[RESERVED_TOKENS.len()..], max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn small_params() -> EncoderParams {
        let cfg = EncoderConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            vocab_size: 16,
            max_positions: 10,
            projection: [8, 6],
        };
        EncoderParams::init(&cfg, 17).unwrap()
    }

    #[test]
    fn checkpoint_round_trips_within_f32_precision() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), params.config());
        assert_eq!(loaded.n_params(), params.n_params());
        for (a, b) in params.data().iter().zip(loaded.data()) {
            assert!((a - b).abs() <= a.abs() * 1e-6 + 1e-9, "{a} vs {b}");
        }
        // Stored values are exactly representable in f32, so a second save
        // must be byte-identical.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        let p = dir.path().join("magic.ckpt");
        fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint(&p).is_err());

        let p = dir.path().join("trunc.ckpt");
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load_checkpoint(&p).is_err());

        let mut padded = bytes.clone();
        padded.push(0);
        let p = dir.path().join("trail.ckpt");
        fs::write(&p, &padded).unwrap();
        assert!(load_checkpoint(&p).is_err());

        // Tamper with the d_model field (second architecture u32): the
        // divisibility check must fire.
        let mut warped = bytes.clone();
        let off = CKPT_MAGIC.len() + 4;
        warped[off..off + 4].copy_from_slice(&9u32.to_le_bytes());
        let p = dir.path().join("shape.ckpt");
        fs::write(&p, &warped).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn vocabulary_round_trips_with_reserved_prefix() {
        let tok = Tokenizer::new(&["apple", "banana", "cherry"], 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        save_vocab(&tok, &path).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(&lines[..5], &RESERVED_TOKENS);
        assert_eq!(lines[5], "apple");

        let loaded = load_vocab(&path, 16).unwrap();
        assert_eq!(loaded.vocab_size(), tok.vocab_size());
        for id in 0..tok.vocab_size() as u32 {
            assert_eq!(loaded.token(id), tok.token(id));
        }
        assert_eq!(loaded.max_len(), 16);
    }

    #[test]
    fn malformed_vocabularies_are_rejected() {
        let dir = tempfile::tempdir().unwrap();

        let p = dir.path().join("missing-reserved.txt");
        fs::write(&p, "[PAD]\n[UNK]\n[CLS]\n[SEP]\nwrong\nword\n").unwrap();
        assert!(load_vocab(&p, 16).is_err());

        let p = dir.path().join("short.txt");
        fs::write(&p, "[PAD]\n[UNK]\n").unwrap();
        assert!(load_vocab(&p, 16).is_err());

        let p = dir.path().join("dup.txt");
        fs::write(&p, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nfoo\nfoo\n").unwrap();
        assert!(load_vocab(&p, 16).is_err());

        let p = dir.path().join("empty-line.txt");
        fs::write(&p, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n\nfoo\n").unwrap();
        assert!(load_vocab(&p, 16).is_err());
    }
}
