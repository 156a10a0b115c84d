//! On-disk index bundle: a snapshot plus the vector and text files it names.
//!
//! `build_bundle("x/index.tanx")` writes `x/index.tanx`, `x/index.vectors`
//! and `x/index.texts`. The snapshot refers to the other two by file name.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distance::Embedding;
use crate::error::{Error, Result};
use crate::hnsw::{HnswIndex, HnswParams};
use crate::ingest::ingest_stream;
use crate::snapshot::{load_index, save_index, IndexSnapshot};
use crate::store::{DiskStore, ExternalStore, TierConfig, TieredVectorStore};
use crate::text::TextStore;
use crate::VectorId;

/// Per-tier cache size while linking new nodes.
const BUILD_CACHE: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub nodes: usize,
    pub dimension: usize,
    pub max_level: usize,
    /// Node count per top level.
    pub level_histogram: Vec<usize>,
    /// Share of nodes reaching level 1 or above.
    pub upper_fraction: f64,
    pub snapshot: PathBuf,
    pub vectors: PathBuf,
    pub texts: PathBuf,
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn file_name(path: &Path) -> PathBuf {
    path.file_name().map(PathBuf::from).unwrap_or_else(|| path.to_path_buf())
}

/// Reads the dimension from the first non-blank JSONL record.
fn sniff_dimension(input: &Path) -> Result<usize> {
    let reader = BufReader::new(File::open(input)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        return v
            .get("embedding")
            .and_then(|e| e.as_array())
            .map(|a| a.len())
            .filter(|d| *d > 0)
            .ok_or_else(|| Error::Ingest {
                line: i + 1,
                reason: "missing or empty \"embedding\" array".into(),
            });
    }
    Err(Error::invalid("input has no records"))
}

/// Ingests a JSONL corpus and writes the three bundle files.
pub fn build_bundle(
    input: impl AsRef<Path>,
    snapshot_path: impl AsRef<Path>,
    params: HnswParams,
    chunk_size: usize,
) -> Result<BuildReport> {
    let input = input.as_ref();
    let snapshot_path = snapshot_path.as_ref();
    let dimension = sniff_dimension(input)?;
    let vectors_path = sibling(snapshot_path, "vectors");
    let texts_path = sibling(snapshot_path, "texts");

    let disk = Arc::new(DiskStore::create(&vectors_path, dimension)?);
    let store = TieredVectorStore::new(disk.clone(), TierConfig::new(BUILD_CACHE, BUILD_CACHE));
    let mut texts = TextStore::create(&texts_path)?;
    let mut index = HnswIndex::new(dimension, params)?;
    ingest_stream(
        BufReader::new(File::open(input)?),
        chunk_size,
        &mut index,
        &store,
        &mut texts,
    )?;
    disk.flush()?;
    texts.finish()?;

    let report = BuildReport {
        nodes: index.len(),
        dimension,
        max_level: index.max_level(),
        level_histogram: index.level_histogram(),
        upper_fraction: if index.is_empty() {
            0.0
        } else {
            index.level_histogram().iter().skip(1).sum::<usize>() as f64 / index.len() as f64
        },
        snapshot: snapshot_path.to_path_buf(),
        vectors: vectors_path.clone(),
        texts: texts_path.clone(),
    };
    let mut snap = IndexSnapshot::new(index);
    snap.vectors = Some(file_name(&vectors_path));
    snap.texts = Some(file_name(&texts_path));
    save_index(&snap, snapshot_path)?;
    Ok(report)
}

/// A loaded bundle.
pub struct Bundle {
    pub index: HnswIndex,
    pub vectors: Arc<DiskStore>,
    pub texts: Option<TextStore>,
}

impl Bundle {
    pub fn open(snapshot_path: impl AsRef<Path>) -> Result<Self> {
        let snapshot_path = snapshot_path.as_ref();
        let snap = load_index(snapshot_path)?;
        let vref = snap
            .vectors
            .as_ref()
            .ok_or_else(|| Error::Format("snapshot names no vector file".into()))?;
        let vectors = Arc::new(DiskStore::open(IndexSnapshot::resolve(snapshot_path, vref))?);
        if vectors.dimension() != snap.index.dimension() {
            return Err(Error::Integrity(format!(
                "vector file has dimension {}, snapshot {}",
                vectors.dimension(),
                snap.index.dimension()
            )));
        }
        if vectors.len() != snap.index.len() {
            return Err(Error::Integrity(format!(
                "vector file holds {} payloads, snapshot {} nodes",
                vectors.len(),
                snap.index.len()
            )));
        }
        let texts = snap
            .texts
            .as_ref()
            .map(|t| TextStore::open(IndexSnapshot::resolve(snapshot_path, t)))
            .transpose()?;
        Ok(Bundle {
            index: snap.index,
            vectors,
            texts,
        })
    }

    /// Every payload in id order.
    pub fn payloads(&self) -> Result<Vec<(VectorId, Embedding)>> {
        let ids = self.vectors.ids();
        let tx = self.vectors.read_batch(&ids)?;
        Ok(ids.into_iter().zip(tx.payloads).collect())
    }
}
