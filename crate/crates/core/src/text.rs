//! Id-to-text store kept apart from the vector tiers.
//!
//! File layout (little-endian):
//!
//! ```text
//! "TTXT" | version u32 | count u64 | table_offset u64
//! UTF-8 blob
//! offset table: (count + 1) x u64, relative to the start of the blob
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::VectorId;

pub const TEXT_FILE_MAGIC: &[u8; 4] = b"TTXT";
const TEXT_FILE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

enum Blob {
    Memory(Vec<u8>),
    Writing(BufWriter<File>),
    File(File),
}

/// Texts addressed by dense ids `base_id..base_id + len`.
pub struct TextStore {
    base_id: VectorId,
    offsets: Vec<u64>,
    blob: Blob,
    reads: AtomicU64,
}

impl TextStore {
    pub fn in_memory() -> Self {
        TextStore {
            base_id: 0,
            offsets: vec![0],
            blob: Blob::Memory(Vec::new()),
            reads: AtomicU64::new(0),
        }
    }

    /// Starts a file-backed store; texts stream to disk as they arrive.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.write_all(&[0u8; HEADER_LEN as usize])?;
        Ok(TextStore {
            base_id: 0,
            offsets: vec![0],
            blob: Blob::Writing(BufWriter::new(file)),
            reads: AtomicU64::new(0),
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)
            .map_err(|_| Error::Integrity("text file shorter than its header".into()))?;
        if &header[0..4] != TEXT_FILE_MAGIC {
            return Err(Error::Format("bad text file magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != TEXT_FILE_VERSION {
            return Err(Error::Format(format!("unsupported text file version {version}")));
        }
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let table = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let mut raw = vec![0u8; ((count + 1) * 8) as usize];
        file.seek(SeekFrom::Start(table))?;
        file.read_exact(&mut raw)
            .map_err(|_| Error::Integrity("text offset table truncated".into()))?;
        let offsets: Vec<u64> = raw
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if offsets.windows(2).any(|w| w[1] < w[0]) || HEADER_LEN + offsets[count as usize] > table
        {
            return Err(Error::Integrity("text offset table is inconsistent".into()));
        }
        Ok(TextStore {
            base_id: 0,
            offsets,
            blob: Blob::File(file),
            reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Next id this store expects.
    pub fn next_id(&self) -> VectorId {
        self.base_id + self.len() as u64
    }

    pub fn append(&mut self, id: VectorId, text: &str) -> Result<()> {
        if id != self.next_id() {
            return Err(Error::invalid(format!(
                "text ids must be dense: expected {}, got {id}",
                self.next_id()
            )));
        }
        match &mut self.blob {
            Blob::Memory(buf) => buf.extend_from_slice(text.as_bytes()),
            Blob::Writing(w) => w.write_all(text.as_bytes())?,
            Blob::File(_) => return Err(Error::invalid("text store is read-only")),
        }
        let last = *self.offsets.last().unwrap();
        self.offsets.push(last + text.len() as u64);
        Ok(())
    }

    /// Writes the offset table and header. Required before the file is read.
    pub fn finish(&mut self) -> Result<()> {
        let count = self.len() as u64;
        let Blob::Writing(w) = &mut self.blob else {
            return Ok(());
        };
        w.flush()?;
        let table = HEADER_LEN + *self.offsets.last().unwrap();
        for off in &self.offsets {
            w.write_all(&off.to_le_bytes())?;
        }
        w.flush()?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(TEXT_FILE_MAGIC);
        header.extend_from_slice(&TEXT_FILE_VERSION.to_le_bytes());
        header.extend_from_slice(&count.to_le_bytes());
        header.extend_from_slice(&table.to_le_bytes());
        let file = w.get_ref().try_clone()?;
        file.write_all_at(&header, 0)?;
        file.sync_data()?;
        self.blob = Blob::File(file);
        Ok(())
    }

    pub fn get_text(&self, id: VectorId) -> Result<String> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let idx = id
            .checked_sub(self.base_id)
            .filter(|i| (*i as usize) < self.len())
            .ok_or(Error::MissingText(id))? as usize;
        let (start, end) = (self.offsets[idx], self.offsets[idx + 1]);
        let bytes = match &self.blob {
            Blob::Memory(buf) => buf[start as usize..end as usize].to_vec(),
            Blob::File(f) => {
                let mut buf = vec![0u8; (end - start) as usize];
                f.read_exact_at(&mut buf, HEADER_LEN + start)?;
                buf
            }
            Blob::Writing(_) => {
                return Err(Error::invalid("text store must be finished before reading"))
            }
        };
        String::from_utf8(bytes).map_err(|_| Error::Integrity(format!("text {id} is not UTF-8")))
    }

    /// Texts of final results, in order.
    pub fn get_texts(&self, ids: &[VectorId]) -> Result<Vec<String>> {
        ids.iter().map(|id| self.get_text(*id)).collect()
    }

    /// Number of `get_text` calls so far.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_roundtrip() {
        let mut t = TextStore::in_memory();
        t.append(0, "hello").unwrap();
        t.append(1, "").unwrap();
        t.append(2, "wörld").unwrap();
        assert_eq!(t.get_text(0).unwrap(), "hello");
        assert_eq!(t.get_text(1).unwrap(), "");
        assert_eq!(t.get_text(2).unwrap(), "wörld");
        assert!(matches!(t.get_text(3), Err(Error::MissingText(3))));
        assert!(t.append(5, "gap").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ttxt");
        let mut t = TextStore::create(&path).unwrap();
        for i in 0..100u64 {
            t.append(i, &format!("doc {i} ✓")).unwrap();
        }
        t.finish().unwrap();
        assert_eq!(t.get_text(42).unwrap(), "doc 42 ✓");
        let r = TextStore::open(&path).unwrap();
        assert_eq!(r.len(), 100);
        assert_eq!(r.get_text(99).unwrap(), "doc 99 ✓");
        assert_eq!(r.reads(), 1);
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ttxt");
        std::fs::write(&path, [0u8; 40]).unwrap();
        assert!(matches!(TextStore::open(&path), Err(Error::Format(_))));
    }
}
