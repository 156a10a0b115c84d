//! Streaming JSON-lines ingestion.
//!
//! Each input line is `{"text": "...", "embedding": [f, f, ...]}`. Records get
//! sequential ids in file order. Lines are consumed `chunk_size` at a time: a
//! chunk is fully parsed and validated before any of it is written, so a bad
//! line leaves earlier chunks ingested and its own chunk untouched.

use std::io::BufRead;

use serde::Deserialize;

use crate::distance::Embedding;
use crate::error::{Error, Result};
use crate::hnsw::{HnswIndex, OnDemand};
use crate::store::TieredVectorStore;
use crate::text::TextStore;
use crate::VectorId;

#[derive(Debug, Deserialize)]
struct RawRecord {
    text: String,
    embedding: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct DocumentRecord {
    pub id: VectorId,
    pub text: String,
    pub embedding: Embedding,
}

/// Parses one JSONL line. `line_no` is 1-based and only used in errors.
pub fn parse_record(line: &str, line_no: usize, dimension: usize) -> Result<(String, Embedding)> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Ingest {
        line: line_no,
        reason: e.to_string(),
    })?;
    if raw.embedding.len() != dimension {
        return Err(Error::Ingest {
            line: line_no,
            reason: format!(
                "dimension mismatch: expected {dimension}, got {}",
                raw.embedding.len()
            ),
        });
    }
    let embedding = Embedding::new(raw.embedding).map_err(|e| Error::Ingest {
        line: line_no,
        reason: e.to_string(),
    })?;
    Ok((raw.text, embedding))
}

/// Ingests every record of `source` into `index`, writing embeddings through
/// to tier 3 and texts to `texts`. Returns the number of records ingested.
pub fn ingest_stream<R: BufRead>(
    source: R,
    chunk_size: usize,
    index: &mut HnswIndex,
    store: &TieredVectorStore,
    texts: &mut TextStore,
) -> Result<usize> {
    if chunk_size == 0 {
        return Err(Error::invalid("chunk_size must be >= 1"));
    }
    let dimension = index.dimension();
    let metric = index.metric();
    let mut next_id = index.ids().iter().max().map_or(0, |m| m + 1).max(texts.next_id());
    let mut chunk: Vec<DocumentRecord> = Vec::with_capacity(chunk_size);
    let mut total = 0;
    let mut lines = source.lines().enumerate();

    loop {
        chunk.clear();
        while chunk.len() < chunk_size {
            let Some((i, line)) = lines.next() else { break };
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (text, embedding) = parse_record(&line, i + 1, dimension)?;
            metric.check(&embedding).map_err(|e| Error::Ingest {
                line: i + 1,
                reason: e.to_string(),
            })?;
            chunk.push(DocumentRecord {
                id: next_id + chunk.len() as u64,
                text,
                embedding,
            });
        }
        if chunk.is_empty() {
            break;
        }

        let items: Vec<_> = chunk.iter().map(|r| (r.id, r.embedding.clone())).collect();
        store.write_through(&items)?;
        for r in &chunk {
            texts.append(r.id, &r.text)?;
        }
        let mut source = OnDemand { store };
        for r in &chunk {
            index.link_new(r.id, &r.embedding, &mut source)?;
        }
        next_id += chunk.len() as u64;
        total += chunk.len();
    }
    Ok(total)
}
