//! Persistent tier 3: a flat file of fixed-width records.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "TANS" | version u32 | dimension u32 | count u64
//! { id u64 | dimension x f32 } * count
//! ```

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Instant;

use super::backend::{ExternalStore, Transaction};
use crate::distance::Embedding;
use crate::error::{Error, Result};
use crate::VectorId;

pub const VECTOR_FILE_MAGIC: &[u8; 4] = b"TANS";
pub const VECTOR_FILE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 4 + 8;

struct Index {
    offsets: HashMap<VectorId, u64>,
    order: Vec<VectorId>,
}

pub struct DiskStore {
    path: PathBuf,
    dimension: usize,
    file: File,
    writer: Mutex<()>,
    index: RwLock<Index>,
}

impl DiskStore {
    fn record_len(&self) -> u64 {
        8 + 4 * self.dimension as u64
    }

    /// Creates (truncating) a new vector file.
    pub fn create(path: impl AsRef<Path>, dimension: usize) -> Result<Self> {
        if dimension == 0 || dimension > u32::MAX as usize {
            return Err(Error::invalid("dimension must be in 1..=u32::MAX"));
        }
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)?;
        file.write_all(&header_bytes(dimension as u32, 0))?;
        Ok(DiskStore {
            path,
            dimension,
            file,
            writer: Mutex::new(()),
            index: RwLock::new(Index {
                offsets: HashMap::new(),
                order: Vec::new(),
            }),
        })
    }

    /// Opens an existing vector file, scanning record ids to build the
    /// offset table.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        let mut reader = BufReader::new(file.try_clone()?);
        let mut header = [0u8; HEADER_LEN as usize];
        reader
            .read_exact(&mut header)
            .map_err(|_| Error::Integrity("vector file shorter than its header".into()))?;
        if &header[0..4] != VECTOR_FILE_MAGIC {
            return Err(Error::Format("bad vector file magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VECTOR_FILE_VERSION {
            return Err(Error::Format(format!(
                "unsupported vector file version {version}"
            )));
        }
        let dimension = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
        if dimension == 0 {
            return Err(Error::Format("vector file declares dimension 0".into()));
        }
        let record_len = 8 + 4 * dimension as u64;
        let file_len = file.metadata()?.len();
        if file_len < HEADER_LEN + count * record_len {
            return Err(Error::Integrity(format!(
                "vector file truncated: {count} records declared, {} bytes present",
                file_len
            )));
        }

        let mut offsets = HashMap::with_capacity(count as usize);
        let mut order = Vec::with_capacity(count as usize);
        let mut record = vec![0u8; record_len as usize];
        for i in 0..count {
            reader.read_exact(&mut record)?;
            let id = u64::from_le_bytes(record[0..8].try_into().unwrap());
            if offsets.insert(id, HEADER_LEN + i * record_len).is_some() {
                return Err(Error::Integrity(format!("duplicate id {id} in vector file")));
            }
            order.push(id);
        }
        Ok(DiskStore {
            path,
            dimension,
            file,
            writer: Mutex::new(()),
            index: RwLock::new(Index { offsets, order }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_at(&self, offset: u64, id: VectorId) -> Result<Embedding> {
        let mut buf = vec![0u8; self.record_len() as usize];
        self.file.read_exact_at(&mut buf, offset)?;
        let stored = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        if stored != id {
            return Err(Error::Integrity(format!(
                "record at offset {offset} holds id {stored}, expected {id}"
            )));
        }
        let values = buf[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Embedding::new(values)
    }
}

fn header_bytes(dimension: u32, count: u64) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN as usize);
    h.extend_from_slice(VECTOR_FILE_MAGIC);
    h.extend_from_slice(&VECTOR_FILE_VERSION.to_le_bytes());
    h.extend_from_slice(&dimension.to_le_bytes());
    h.extend_from_slice(&count.to_le_bytes());
    h
}

impl ExternalStore for DiskStore {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn len(&self) -> usize {
        self.index.read().unwrap().order.len()
    }

    fn contains(&self, id: VectorId) -> bool {
        self.index.read().unwrap().offsets.contains_key(&id)
    }

    fn ids(&self) -> Vec<VectorId> {
        self.index.read().unwrap().order.clone()
    }

    fn read_batch(&self, ids: &[VectorId]) -> Result<Transaction> {
        let start = Instant::now();
        let index = self.index.read().unwrap();
        let mut located = ids
            .iter()
            .enumerate()
            .map(|(pos, id)| {
                index
                    .offsets
                    .get(id)
                    .map(|off| (*off, pos, *id))
                    .ok_or(Error::MissingPayload(*id))
            })
            .collect::<Result<Vec<_>>>()?;
        drop(index);
        // sequential offsets keep the batch a forward scan
        located.sort_unstable();
        let mut out: Vec<Option<Embedding>> = vec![None; ids.len()];
        for (offset, pos, id) in located {
            out[pos] = Some(self.read_at(offset, id)?);
        }
        Ok(Transaction {
            payloads: out.into_iter().map(Option::unwrap).collect(),
            elapsed_ns: start.elapsed().as_nanos() as u64,
        })
    }

    fn write_batch(&self, items: &[(VectorId, Embedding)]) -> Result<()> {
        let _guard = self.writer.lock().unwrap();
        let mut index = self.index.write().unwrap();
        let mut seen = std::collections::HashSet::new();
        for (id, v) in items {
            if v.dim() != self.dimension {
                return Err(Error::DimensionMismatch {
                    expected: self.dimension,
                    actual: v.dim(),
                });
            }
            if index.offsets.contains_key(id) || !seen.insert(*id) {
                return Err(Error::DuplicateId(*id));
            }
        }
        let base = HEADER_LEN + index.order.len() as u64 * self.record_len();
        let mut buf = Vec::with_capacity(items.len() * self.record_len() as usize);
        for (id, v) in items {
            buf.extend_from_slice(&id.to_le_bytes());
            for x in v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = &self.file;
        file.seek(SeekFrom::Start(base))?;
        file.write_all(&buf)?;
        for (i, (id, _)) in items.iter().enumerate() {
            index.offsets.insert(*id, base + i as u64 * self.record_len());
            index.order.push(*id);
        }
        let count = index.order.len() as u64;
        self.file.write_all_at(&count.to_le_bytes(), 12)?;
        Ok(())
    }

    fn flush(&self) -> Result<()> {
        self.file.sync_data()?;
        Ok(())
    }
}
