//! On-disk formats for graph-side data: engagement TSV, corpus JSONL,
//! label TSV, and the binary user-vector record file with its id sidecar.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::graph::{Corpus, EngagementGraph, EngagementRecord, LabelSet};

const RECORDS_MAGIC: &str = "SOCLM-REC1";

/// Engagement log: one `user \t tweet \t relation` line per event.
pub fn load_engagement_log(path: &Path) -> Result<EngagementGraph> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut graph = EngagementGraph::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::parse(
                path,
                i + 1,
                "expected three tab-separated non-empty fields",
            ));
        }
        graph.add_event(fields[0], fields[1], fields[2]);
    }
    if graph.edges().is_empty() {
        return Err(Error::InvalidInput(format!(
            "engagement log {} contains no events",
            path.display()
        )));
    }
    Ok(graph)
}

pub fn save_engagement_log(graph: &EngagementGraph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for e in graph.edges() {
        writeln!(
            w,
            "{}\t{}\t{}",
            graph.user_id(e.user),
            graph.tweet_id(e.tweet),
            graph.relations()[e.relation as usize]
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    text: String,
}

/// Corpus: one JSON object `{"id": ..., "text": ...}` per line.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Corpus::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let entry: CorpusLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, i + 1, format!("bad JSON: {e}")))?;
        corpus
            .push(&entry.id, &entry.text)
            .map_err(|_| Error::parse(path, i + 1, format!("duplicate tweet id {:?}", entry.id)))?;
    }
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (id, text) in corpus.entries() {
        let line = serde_json::to_string(&CorpusLine {
            id: id.clone(),
            text: text.clone(),
        })
        .expect("corpus line serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labels: one `tweet_id \t class_name` line per labeled tweet.
pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = LabelSet::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::parse(
                path,
                i + 1,
                "expected two tab-separated non-empty fields",
            ));
        }
        labels.insert(fields[0], fields[1]);
    }
    Ok(labels)
}

pub fn save_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (id, class) in labels.entries() {
        writeln!(w, "{id}\t{}", labels.class_names()[*class as usize])
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ids");
    PathBuf::from(s)
}

/// Records: binary vectors plus a text sidecar (`<path>.ids`) holding the
/// tweet id list the vectors index into.
///
/// Layout: magic, record count, vector dim, then per record a u32 index into
/// the sidecar list followed by the vector as little-endian f32.
pub fn save_records(records: &[EngagementRecord], path: &Path) -> Result<()> {
    let dim = records.first().map(|r| r.user_vector.len()).unwrap_or(0);
    if records.iter().any(|r| r.user_vector.len() != dim) {
        return Err(Error::InvalidInput(
            "records have inconsistent vector dims".into(),
        ));
    }
    // Sidecar ids in first-appearance order, deduplicated.
    let mut ids: Vec<&str> = Vec::new();
    let mut id_index = std::collections::HashMap::new();
    for r in records {
        id_index.entry(r.tweet_id.as_str()).or_insert_with(|| {
            ids.push(r.tweet_id.as_str());
            (ids.len() - 1) as u32
        });
    }
    let sidecar = sidecar_path(path);
    let mut sw = BufWriter::new(File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?);
    for id in &ids {
        writeln!(sw, "{id}").map_err(|e| Error::io(&sidecar, e))?;
    }
    sw.flush().map_err(|e| Error::io(&sidecar, e))?;

    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    binio::write_magic(&mut w, path, RECORDS_MAGIC)?;
    binio::write_u32(&mut w, path, records.len() as u32)?;
    binio::write_u32(&mut w, path, dim as u32)?;
    for r in records {
        binio::write_u32(&mut w, path, id_index[r.tweet_id.as_str()])?;
        binio::write_f32_row(&mut w, path, &r.user_vector)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_records(path: &Path) -> Result<Vec<EngagementRecord>> {
    let sidecar = sidecar_path(path);
    let mut ids = Vec::new();
    let sf = File::open(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    for line in BufReader::new(sf).lines() {
        ids.push(line.map_err(|e| Error::io(&sidecar, e))?);
    }

    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    binio::read_magic(&mut r, path, RECORDS_MAGIC)?;
    let count = binio::read_u32(&mut r, path)? as usize;
    let dim = binio::read_u32(&mut r, path)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = binio::read_u32(&mut r, path)? as usize;
        let id = ids.get(idx).ok_or_else(|| {
            Error::Format {
                path: path.to_path_buf(),
                msg: format!("record references id {idx} beyond sidecar ({} ids)", ids.len()),
            }
        })?;
        let user_vector = binio::read_f32_row(&mut r, path, dim)?;
        records.push(EngagementRecord {
            user_vector,
            tweet_id: id.clone(),
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "trailing bytes after last record".into(),
        });
    }
    Ok(records)
}
