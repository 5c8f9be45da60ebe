//! Tensor serialization.
//!
//! Record layout: magic `IFT1`, dtype byte, rank byte, rank×u64 LE dims,
//! then the row-major payload in little-endian order. Checkpoints are a
//! `weights.bin` of concatenated records plus an `index.json` mapping each
//! name to its byte offset, shape, and dtype.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"IFT1";
const MAX_RANK: u8 = 8;
const MAX_NUMEL: u64 = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
    U16,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
            Dtype::U16 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            3 => Some(Dtype::U16),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            "u8" => Some(Dtype::U8),
            "u16" => Some(Dtype::U16),
            _ => None,
        }
    }
}

/// An owned tensor value as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
    U8(Vec<usize>, Vec<u8>),
    U16(Vec<usize>, Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(..) => Dtype::F32,
            TensorData::F64(..) => Dtype::F64,
            TensorData::U8(..) => Dtype::U8,
            TensorData::U16(..) => Dtype::U16,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(s, _)
            | TensorData::F64(s, _)
            | TensorData::U8(s, _)
            | TensorData::U16(s, _) => s,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Widen any payload to f64 values.
    pub fn f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32(_, v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(_, v) => v.clone(),
            TensorData::U8(_, v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U16(_, v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Pack f64 values for storage; only float dtypes are valid targets.
    pub fn from_f64(shape: Vec<usize>, values: &[f64], dtype: Dtype) -> Result<TensorData> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::contract(format!(
                "tensor data: shape {shape:?} holds {numel} elements, got {}",
                values.len()
            )));
        }
        match dtype {
            Dtype::F32 => Ok(TensorData::F32(
                shape,
                values.iter().map(|&v| v as f32).collect(),
            )),
            Dtype::F64 => Ok(TensorData::F64(shape, values.to_vec())),
            _ => Err(Error::contract(format!(
                "tensor data: cannot pack floats as {}",
                dtype.as_str()
            ))),
        }
    }

    fn payload_len(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn exact(&mut self, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            path: path.to_string(),
            offset: at,
            msg: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }
}

/// Write one record to a stream. Returns the number of bytes written.
pub fn write_ift_stream<W: Write>(w: &mut W, t: &TensorData) -> Result<u64> {
    w.write_all(&MAGIC)?;
    w.write_all(&[t.dtype().code(), t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t {
        TensorData::F32(_, v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F64(_, v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::U8(_, v) => w.write_all(v)?,
        TensorData::U16(_, v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(6 + 8 * t.shape().len() as u64 + t.payload_len() as u64)
}

/// Read one record from a stream. `path` labels any format error.
pub fn read_ift_stream<R: Read>(r: &mut R, path: &str) -> Result<TensorData> {
    let mut c = Counting { inner: r, offset: 0 };
    read_record(&mut c, path)
}

fn read_record<R: Read>(c: &mut Counting<R>, path: &str) -> Result<TensorData> {
    let fmt = |offset: u64, msg: String| Error::Format {
        path: path.to_string(),
        offset,
        msg,
    };
    let mut head = [0u8; 6];
    c.exact(&mut head, path, "header")?;
    if head[..4] != MAGIC {
        return Err(fmt(0, format!("bad magic {:?}, expected \"IFT1\"", &head[..4])));
    }
    let dtype = Dtype::from_code(head[4])
        .ok_or_else(|| fmt(4, format!("unknown dtype code {}", head[4])))?;
    let rank = head[5];
    if rank > MAX_RANK {
        return Err(fmt(5, format!("rank {rank} exceeds limit {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        c.exact(&mut b, path, "dimension")?;
        let d = u64::from_le_bytes(b);
        numel = numel.saturating_mul(d.max(1));
        if numel > MAX_NUMEL {
            return Err(fmt(c.offset - 8, format!("dimension product exceeds {MAX_NUMEL}")));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.size_bytes()];
    c.exact(&mut payload, path, "payload")?;
    Ok(match dtype {
        Dtype::F32 => TensorData::F32(
            shape,
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            shape,
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => TensorData::U8(shape, payload),
        Dtype::U16 => TensorData::U16(
            shape,
            payload
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
    })
}

pub fn write_ift_file(path: &Path, t: &TensorData) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ift_stream(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_ift_file(path: &Path) -> Result<TensorData> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    read_ift_stream(&mut r, &path.display().to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    offset: u64,
    length: u64,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    records: Vec<IndexEntry>,
}

/// Writes a directory checkpoint: `weights.bin` + `index.json`.
pub struct ArchiveWriter {
    dir: PathBuf,
    file: BufWriter<File>,
    entries: Vec<IndexEntry>,
    offset: u64,
}

impl ArchiveWriter {
    pub fn create(dir: &Path) -> Result<ArchiveWriter> {
        std::fs::create_dir_all(dir)?;
        let file = BufWriter::new(File::create(dir.join("weights.bin"))?);
        Ok(ArchiveWriter {
            dir: dir.to_path_buf(),
            file,
            entries: Vec::new(),
            offset: 0,
        })
    }

    pub fn put(&mut self, name: &str, t: &TensorData) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract(format!("archive: duplicate record {name:?}")));
        }
        let length = write_ift_stream(&mut self.file, t)?;
        self.entries.push(IndexEntry {
            name: name.to_string(),
            offset: self.offset,
            length,
            dtype: t.dtype().as_str().to_string(),
            shape: t.shape().to_vec(),
        });
        self.offset += length;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush()?;
        let index = IndexFile {
            format: "IFT1".to_string(),
            records: self.entries,
        };
        let json = serde_json::to_string_pretty(&index)?;
        std::fs::write(self.dir.join("index.json"), json)?;
        Ok(())
    }
}

/// Reads a directory checkpoint written by [`ArchiveWriter`].
pub struct ArchiveReader {
    entries: Vec<IndexEntry>,
    by_name: HashMap<String, usize>,
    blob: Vec<u8>,
    path: String,
}

impl ArchiveReader {
    pub fn open(dir: &Path) -> Result<ArchiveReader> {
        let index_path = dir.join("index.json");
        let json = std::fs::read_to_string(&index_path)?;
        let index: IndexFile = serde_json::from_str(&json)?;
        if index.format != "IFT1" {
            return Err(Error::Format {
                path: index_path.display().to_string(),
                offset: 0,
                msg: format!("unknown archive format {:?}", index.format),
            });
        }
        let bin_path = dir.join("weights.bin");
        let blob = std::fs::read(&bin_path)?;
        let mut by_name = HashMap::new();
        for (i, e) in index.records.iter().enumerate() {
            if e.offset + e.length > blob.len() as u64 {
                return Err(Error::Format {
                    path: bin_path.display().to_string(),
                    offset: e.offset,
                    msg: format!("record {:?} extends past end of file", e.name),
                });
            }
            if by_name.insert(e.name.clone(), i).is_some() {
                return Err(Error::Format {
                    path: index_path.display().to_string(),
                    offset: 0,
                    msg: format!("duplicate record {:?}", e.name),
                });
            }
        }
        Ok(ArchiveReader {
            entries: index.records,
            by_name,
            blob,
            path: bin_path.display().to_string(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<TensorData> {
        let &i = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::contract(format!("archive: no record {name:?}")))?;
        let e = &self.entries[i];
        let mut slice = &self.blob[e.offset as usize..(e.offset + e.length) as usize];
        let t = read_ift_stream(&mut slice, &self.path)?;
        if t.shape() != e.shape.as_slice() || t.dtype().as_str() != e.dtype {
            return Err(Error::Format {
                path: self.path.clone(),
                offset: e.offset,
                msg: format!("record {:?} disagrees with index entry", e.name),
            });
        }
        Ok(t)
    }
}
