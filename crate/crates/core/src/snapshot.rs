//! Index snapshot files.
//!
//! ```text
//! "TANX" | version u32
//! block*   where block = tag [u8; 4] | len u64 | payload | crc32(payload) u32
//! ```
//!
//! Blocks, in order: `HEAD` (parameters and entry point), `NODE` (id and
//! level per node), one `ADJL` per level (adjacency with edge lengths),
//! `VREF` (relative paths of the vector and text files), `END!`.
//! Everything is little-endian and every block is checksummed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::distance::Metric;
use crate::error::{Error, Result};
use crate::hnsw::{HnswIndex, HnswParams, NodeLinks};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"TANX";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Topology plus references to the payload and text files.
pub struct IndexSnapshot {
    pub index: HnswIndex,
    /// Vector file, relative to the snapshot's directory.
    pub vectors: Option<PathBuf>,
    pub texts: Option<PathBuf>,
}

impl IndexSnapshot {
    pub fn new(index: HnswIndex) -> Self {
        IndexSnapshot {
            index,
            vectors: None,
            texts: None,
        }
    }

    /// Resolves a referenced file against the snapshot location.
    pub fn resolve(snapshot_path: &Path, reference: &Path) -> PathBuf {
        if reference.is_absolute() {
            return reference.to_path_buf();
        }
        snapshot_path
            .parent()
            .map(|d| d.join(reference))
            .unwrap_or_else(|| reference.to_path_buf())
    }
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn block(&mut self, tag: &[u8; 4], payload: &[u8]) -> Result<()> {
        self.out.write_all(tag)?;
        self.out.write_all(&(payload.len() as u64).to_le_bytes())?;
        self.out.write_all(payload)?;
        self.out.write_all(&crc32fast::hash(payload).to_le_bytes())?;
        Ok(())
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn save_index(snapshot: &IndexSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_snapshot(snapshot, &mut bytes)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_snapshot<W: Write>(snapshot: &IndexSnapshot, out: W) -> Result<()> {
    let index = &snapshot.index;
    let params = index.params();
    let nodes = index.nodes();
    let mut w = Writer { out };
    w.out.write_all(SNAPSHOT_MAGIC)?;
    w.out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;

    let mut head = Vec::new();
    head.extend_from_slice(&(index.dimension() as u32).to_le_bytes());
    head.extend_from_slice(&(index.len() as u64).to_le_bytes());
    head.extend_from_slice(&(params.m as u32).to_le_bytes());
    head.extend_from_slice(&(params.ef_construction as u32).to_le_bytes());
    head.push(params.metric.code());
    let levels = if index.is_empty() { 0 } else { index.max_level() as u32 + 1 };
    head.extend_from_slice(&levels.to_le_bytes());
    head.extend_from_slice(&index.entry_point().unwrap_or(u64::MAX).to_le_bytes());
    head.extend_from_slice(&params.seed.to_le_bytes());
    head.extend_from_slice(&index.rng_word_pos().to_le_bytes());
    w.block(b"HEAD", &head)?;

    let mut node = Vec::with_capacity(nodes.len() * 9);
    for n in &nodes {
        node.extend_from_slice(&n.id.to_le_bytes());
        node.push(n.level as u8);
    }
    w.block(b"NODE", &node)?;

    for level in 0..levels as usize {
        let mut adj = Vec::new();
        adj.extend_from_slice(&(level as u32).to_le_bytes());
        let at_level: Vec<(usize, &NodeLinks)> =
            nodes.iter().enumerate().filter(|(_, n)| n.level >= level).collect();
        adj.extend_from_slice(&(at_level.len() as u64).to_le_bytes());
        for (slot, n) in at_level {
            let list = &n.neighbors[level];
            adj.extend_from_slice(&(slot as u32).to_le_bytes());
            adj.extend_from_slice(&(list.len() as u16).to_le_bytes());
            for (id, dist) in list {
                adj.extend_from_slice(&id.to_le_bytes());
                adj.extend_from_slice(&dist.to_le_bytes());
            }
        }
        w.block(b"ADJL", &adj)?;
    }

    let mut vref = Vec::new();
    let as_str = |p: &Option<PathBuf>| {
        p.as_ref()
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    put_str(&mut vref, &as_str(&snapshot.vectors));
    put_str(&mut vref, &as_str(&snapshot.texts));
    w.block(b"VREF", &vref)?;
    w.block(b"END!", &[])?;
    Ok(())
}

/// Little-endian cursor over a verified block payload.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("{} block too short", self.what)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Integrity(format!("{} block holds invalid UTF-8", self.what)))
    }
}

fn read_block<R: Read>(input: &mut R, expect: &[u8; 4]) -> Result<Vec<u8>> {
    let truncated = |_| Error::Integrity("snapshot truncated".into());
    let mut tag = [0u8; 4];
    input.read_exact(&mut tag).map_err(truncated)?;
    if &tag != expect {
        return Err(Error::Integrity(format!(
            "expected block {:?}, found {:?}",
            String::from_utf8_lossy(expect),
            String::from_utf8_lossy(&tag)
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(truncated)?;
    let len = u64::from_le_bytes(len);
    let mut payload = Vec::new();
    input.take(len).read_to_end(&mut payload)?;
    if payload.len() as u64 != len {
        return Err(Error::Integrity("snapshot truncated".into()));
    }
    let mut crc = [0u8; 4];
    input.read_exact(&mut crc).map_err(truncated)?;
    if u32::from_le_bytes(crc) != crc32fast::hash(&payload) {
        return Err(Error::Integrity(format!(
            "checksum mismatch in {} block",
            String::from_utf8_lossy(expect)
        )));
    }
    Ok(payload)
}

pub fn load_index(path: impl AsRef<Path>) -> Result<IndexSnapshot> {
    read_snapshot(BufReader::new(File::open(path)?))
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<IndexSnapshot> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("not a snapshot: file too short".into()))?;
    if &magic[0..4] != SNAPSHOT_MAGIC {
        return Err(Error::Format("bad snapshot magic".into()));
    }
    let version = u32::from_le_bytes(magic[4..8].try_into().unwrap());
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }

    let head = read_block(&mut input, b"HEAD")?;
    let mut c = Cursor { buf: &head, pos: 0, what: "HEAD" };
    let dimension = c.u32()? as usize;
    let count = c.u64()? as usize;
    let m = c.u32()? as usize;
    let ef_construction = c.u32()? as usize;
    let metric = Metric::from_code(c.u8()?)
        .ok_or_else(|| Error::Format("unknown metric code".into()))?;
    let levels = c.u32()? as usize;
    let entry = c.u64()?;
    let seed = c.u64()?;
    let word_pos = c.u128()?;
    let params = HnswParams { m, ef_construction, metric, seed };

    let node = read_block(&mut input, b"NODE")?;
    if node.len() != count * 9 {
        return Err(Error::Integrity("NODE block size disagrees with header".into()));
    }
    let mut c = Cursor { buf: &node, pos: 0, what: "NODE" };
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let id = c.u64()?;
        let level = c.u8()? as usize;
        if level >= levels {
            return Err(Error::Integrity(format!("node {id} above declared level count")));
        }
        nodes.push(NodeLinks { id, level, neighbors: vec![Vec::new(); level + 1] });
    }

    for level in 0..levels {
        let adj = read_block(&mut input, b"ADJL")?;
        let mut c = Cursor { buf: &adj, pos: 0, what: "ADJL" };
        if c.u32()? as usize != level {
            return Err(Error::Integrity("adjacency blocks out of order".into()));
        }
        let n = c.u64()? as usize;
        for _ in 0..n {
            let slot = c.u32()? as usize;
            let deg = c.u16()? as usize;
            let node = nodes
                .get_mut(slot)
                .filter(|nd| nd.level >= level)
                .ok_or_else(|| Error::Integrity(format!("bad slot {slot} at level {level}")))?;
            let mut list = Vec::with_capacity(deg);
            for _ in 0..deg {
                list.push((c.u64()?, c.f32()?));
            }
            node.neighbors[level] = list;
        }
    }

    let vref = read_block(&mut input, b"VREF")?;
    let mut c = Cursor { buf: &vref, pos: 0, what: "VREF" };
    let path = |s: String| (!s.is_empty()).then(|| PathBuf::from(s));
    let vectors = path(c.string()?);
    let texts = path(c.string()?);
    read_block(&mut input, b"END!")?;

    let entry = (count > 0).then_some(entry);
    let index = HnswIndex::from_nodes(dimension, params, nodes, entry, word_pos)?;
    Ok(IndexSnapshot { index, vectors, texts })
}
