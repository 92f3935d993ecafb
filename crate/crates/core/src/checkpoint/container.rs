//! The DPPX binary container.
//!
//! All integers are little-endian.
//!
//! ```text
//! "DPPX"                      4 bytes magic
//! version                     u16 (= 1)
//! kind                        u8  (0 checkpoint, 1 delta)
//! reserved                    u8  (= 0)
//! topology tag                u16 length + UTF-8
//! metadata                    u32 length + UTF-8 JSON
//! tensor count                u32
//! per tensor:
//!   name                      u16 length + UTF-8
//!   rank                      u8 (1 or 2)
//!   rows, cols                u32, u32 (rank 1: rows = 1)
//!   format                    u8 (0 dense, 1 csr)
//!   dense payload             rows*cols f32
//!   csr payload               nnz u64, row_ptr (rows+1) u64, col_idx nnz u32, values nnz f32
//! checksum                    u64 FNV-1a of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::checkpoint::{CsrTensor, DeltaMeta, DeltaSet, ModelCheckpoint, Shape, SparseDelta, SparseTensor, Tensor};
use crate::error::{Error, Result};
use crate::numkit::fnv1a64;

pub const MAGIC: &[u8; 4] = b"DPPX";
pub const VERSION: u16 = 1;

const KIND_CHECKPOINT: u8 = 0;
const KIND_DELTA: u8 = 1;
const FORMAT_DENSE: u8 = 0;
const FORMAT_CSR: u8 = 1;

/// Fixed bytes of a file: magic, version, kind, reserved, the three length
/// prefixes and the trailing checksum.
pub const FILE_OVERHEAD: usize = 4 + 2 + 1 + 1 + 2 + 4 + 4 + 8;

/// Bytes of one tensor record, excluding its name.
pub fn tensor_record_len(shape: Shape, format_csr: bool, nnz: usize) -> usize {
    let head = 2 + 1 + 4 + 4 + 1;
    if format_csr {
        head + 8 + 8 * (shape.rows() + 1) + 4 * nnz + 4 * nnz
    } else {
        head + 4 * shape.numel()
    }
}

/// What a container holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Checkpoint(ModelCheckpoint),
    Delta(SparseDelta),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::domain(format!("string too long: {} bytes", s.len())))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn str32(&mut self, s: &str) -> Result<()> {
        let len = u32::try_from(s.len()).map_err(|_| Error::domain("metadata too long"))?;
        self.u32(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn shape(&mut self, shape: Shape) -> Result<()> {
        let to32 = |v: usize| u32::try_from(v).map_err(|_| Error::domain(format!("dimension {v} exceeds u32")));
        self.u8(if shape.is_matrix() { 2 } else { 1 });
        self.u32(to32(shape.rows())?);
        self.u32(to32(shape.cols())?);
        Ok(())
    }
}

fn encode(kind: u8, tag: &str, meta_json: &str, tensors: &[(&str, &SparseTensor)]) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u8(kind);
    w.u8(0);
    w.str16(tag)?;
    w.str32(meta_json)?;
    w.u32(u32::try_from(tensors.len()).map_err(|_| Error::domain("too many tensors"))?);
    for (name, t) in tensors {
        w.str16(name)?;
        w.shape(t.shape())?;
        match t {
            SparseTensor::Dense(d) => {
                w.u8(FORMAT_DENSE);
                w.f32s(d.values());
            }
            SparseTensor::Csr(c) => {
                w.u8(FORMAT_CSR);
                w.u64(c.nnz() as u64);
                for &p in c.row_ptr() {
                    w.u64(p);
                }
                for &ci in c.col_idx() {
                    w.u32(ci);
                }
                w.f32s(c.values());
            }
        }
    }
    let sum = fnv1a64(&w.buf);
    w.u64(sum);
    Ok(w.buf)
}

/// Serializes a checkpoint.
pub fn encode_checkpoint(c: &ModelCheckpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_string(&c.meta)?;
    let dense: Vec<(String, SparseTensor)> = c
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), SparseTensor::Dense(t.clone())))
        .collect();
    let refs: Vec<(&str, &SparseTensor)> = dense.iter().map(|(n, t)| (n.as_str(), t)).collect();
    encode(KIND_CHECKPOINT, &c.topology_tag, &meta, &refs)
}

/// Serializes a sparse (or mixed) delta.
pub fn encode_delta(d: &SparseDelta) -> Result<Vec<u8>> {
    let meta = serde_json::to_string(&d.meta)?;
    let refs: Vec<(&str, &SparseTensor)> = d.tensors().iter().map(|(n, t)| (n.as_str(), t)).collect();
    encode(KIND_DELTA, &d.topology_tag, &meta, &refs)
}

/// Serializes a dense delta; every record uses the dense format.
pub fn encode_dense_delta(d: &DeltaSet) -> Result<Vec<u8>> {
    let meta = serde_json::to_string(&d.meta)?;
    let dense: Vec<(String, SparseTensor)> = d
        .entries()
        .iter()
        .map(|(n, t)| (n.clone(), SparseTensor::Dense(t.clone())))
        .collect();
    let refs: Vec<(&str, &SparseTensor)> = dense.iter().map(|(n, t)| (n.as_str(), t)).collect();
    encode(KIND_DELTA, &d.topology_tag, &meta, &refs)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::corrupt(format!("truncated at byte {} (need {n} more)", self.pos)))?;
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
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::corrupt("invalid UTF-8 string"))
    }
    /// Checks that `count * width` bytes remain before allocating.
    fn reserve(&self, count: u64, width: u64) -> Result<usize> {
        let need = count
            .checked_mul(width)
            .ok_or_else(|| Error::corrupt("length overflow"))?;
        if need > (self.buf.len() - self.pos) as u64 {
            return Err(Error::corrupt(format!("truncated: {need} payload bytes declared")));
        }
        Ok(count as usize)
    }
    fn f32s(&mut self, count: u64) -> Result<Vec<f32>> {
        let n = self.reserve(count, 4)?;
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

struct Decoded {
    kind: u8,
    tag: String,
    meta_json: String,
    tensors: Vec<(String, SparseTensor)>,
}

fn decode(buf: &[u8]) -> Result<Decoded> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::corrupt("bad magic"));
    }
    if buf.len() < FILE_OVERHEAD {
        return Err(Error::corrupt("truncated header"));
    }
    let (body, sum) = buf.split_at(buf.len() - 8);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::corrupt(format!("unsupported version {version}")));
    }
    if u64::from_le_bytes(sum.try_into().unwrap()) != fnv1a64(body) {
        return Err(Error::corrupt("checksum mismatch"));
    }
    let kind = r.u8()?;
    if kind != KIND_CHECKPOINT && kind != KIND_DELTA {
        return Err(Error::corrupt(format!("unknown payload kind {kind}")));
    }
    r.u8()?;
    let tag_len = r.u16()? as usize;
    let tag = r.string(tag_len)?;
    let meta_len = r.u32()? as usize;
    let meta_json = r.string(meta_len)?;
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u8()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let shape = match rank {
            1 if rows == 1 => Shape::Vector(cols),
            2 => Shape::Matrix(rows, cols),
            _ => return Err(Error::corrupt(format!("tensor `{name}`: bad rank {rank} / rows {rows}"))),
        };
        let tensor = match r.u8()? {
            FORMAT_DENSE => {
                let values = r.f32s(shape.numel() as u64)?;
                let t = Tensor::from_values(shape, values)
                    .map_err(|e| Error::corrupt(format!("tensor `{name}`: {e}")))?;
                SparseTensor::Dense(t)
            }
            FORMAT_CSR => {
                let nnz = r.u64()?;
                let n_ptr = r.reserve(rows as u64 + 1, 8)?;
                let row_ptr = (0..n_ptr).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                let n_idx = r.reserve(nnz, 4)?;
                let col_idx = (0..n_idx).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let values = r.f32s(nnz)?;
                SparseTensor::Csr(
                    CsrTensor::new(shape, row_ptr, col_idx, values)
                        .map_err(|e| Error::corrupt(format!("tensor `{name}`: {e}")))?,
                )
            }
            f => return Err(Error::corrupt(format!("tensor `{name}`: unknown format {f}"))),
        };
        tensors.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(Error::corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Decoded {
        kind,
        tag,
        meta_json,
        tensors,
    })
}

/// Parses any container.
pub fn decode_payload(buf: &[u8]) -> Result<Payload> {
    let d = decode(buf)?;
    match d.kind {
        KIND_CHECKPOINT => {
            let meta: BTreeMap<String, String> =
                serde_json::from_str(&d.meta_json).map_err(|e| Error::corrupt(format!("metadata: {e}")))?;
            let tensors = d
                .tensors
                .into_iter()
                .map(|(n, t)| match t {
                    SparseTensor::Dense(t) => Ok((n, t)),
                    SparseTensor::Csr(_) => Err(Error::corrupt(format!("checkpoint tensor `{n}` stored sparse"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let mut c = ModelCheckpoint::new(d.tag, tensors).map_err(|e| Error::corrupt(e.to_string()))?;
            c.meta = meta;
            Ok(Payload::Checkpoint(c))
        }
        _ => {
            let meta: DeltaMeta =
                serde_json::from_str(&d.meta_json).map_err(|e| Error::corrupt(format!("metadata: {e}")))?;
            Ok(Payload::Delta(
                SparseDelta::new(d.tag, d.tensors, meta).map_err(|e| Error::corrupt(e.to_string()))?,
            ))
        }
    }
}

/// Writes bytes through a temporary sibling file and renames it into place,
/// so a failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, c: &ModelCheckpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(c)?)
}

pub fn save_delta(path: &Path, d: &SparseDelta) -> Result<()> {
    write_atomic(path, &encode_delta(d)?)
}

pub fn save_dense_delta(path: &Path, d: &DeltaSet) -> Result<()> {
    write_atomic(path, &encode_dense_delta(d)?)
}

pub fn load(path: &Path) -> Result<Payload> {
    decode_payload(&fs::read(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    match load(path)? {
        Payload::Checkpoint(c) => Ok(c),
        Payload::Delta(_) => Err(Error::corrupt(format!("{} holds a delta, not a checkpoint", path.display()))),
    }
}

pub fn load_delta(path: &Path) -> Result<SparseDelta> {
    match load(path)? {
        Payload::Delta(d) => Ok(d),
        Payload::Checkpoint(_) => Err(Error::corrupt(format!("{} holds a checkpoint, not a delta", path.display()))),
    }
}
