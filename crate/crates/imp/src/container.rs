//! The IMPB single-file container.
//!
//! ```text
//! "IMPB" | u32 version | u64 n_meta | meta* | u64 n_tensors | index* | pad to 32 | data
//! meta  = u32 key_len, key, u8 tag, payload
//!         tag 0 str: u64 len, bytes | 1 i64 | 2 f64 | 3 list: u64 count, i64*
//! index = u32 name_len, name, u8 rank, u64 dims[rank], u8 dtype, u64 offset
//! ```
//!
//! All integers are little-endian. Offsets are relative to the data section
//! and aligned to 32 bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use imp_core::manifest::{keys, Manifest, MetaValue, TensorInfo, TensorSource, FORMAT_VERSION, TENSOR_ALIGN};
use imp_core::tensor::MAX_RANK;
use imp_core::{DType, Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"IMPB";

const TAG_STR: u8 = 0;
const TAG_INT: u8 = 1;
const TAG_FLOAT: u8 = 2;
const TAG_LIST: u8 = 3;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(TENSOR_ALIGN) * TENSOR_ALIGN
}

/// Serialized header, padding to the data section included.
pub fn encode_header(manifest: &Manifest) -> Vec<u8> {
    let mut h = Vec::new();
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&manifest.format_version.to_le_bytes());
    h.extend_from_slice(&(manifest.metadata().len() as u64).to_le_bytes());
    for (key, value) in manifest.metadata() {
        h.extend_from_slice(&(key.len() as u32).to_le_bytes());
        h.extend_from_slice(key.as_bytes());
        h.push(value.tag());
        match value {
            MetaValue::Str(s) => {
                h.extend_from_slice(&(s.len() as u64).to_le_bytes());
                h.extend_from_slice(s.as_bytes());
            }
            MetaValue::Int(v) => h.extend_from_slice(&v.to_le_bytes()),
            MetaValue::Float(v) => h.extend_from_slice(&v.to_le_bytes()),
            MetaValue::IntList(vs) => {
                h.extend_from_slice(&(vs.len() as u64).to_le_bytes());
                for v in vs {
                    h.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    h.extend_from_slice(&(manifest.tensors().len() as u64).to_le_bytes());
    for t in manifest.tensors() {
        h.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        h.extend_from_slice(t.name.as_bytes());
        h.push(t.shape.len() as u8);
        for &d in &t.shape {
            h.extend_from_slice(&(d as u64).to_le_bytes());
        }
        h.push(t.dtype.tag());
        h.extend_from_slice(&t.offset.to_le_bytes());
    }
    h.resize(align_up(h.len() as u64) as usize, 0);
    h
}

/// Size of the file [`write_container`] would produce.
pub fn encoded_len(manifest: &Manifest) -> u64 {
    encode_header(manifest).len() as u64 + manifest.data_len()
}

/// Writes `manifest` and the tensors it indexes to `out`.
pub fn write_to(manifest: &Manifest, tensors: &BTreeMap<String, Tensor>, out: &mut impl Write) -> Result<()> {
    manifest.validate_layout()?;
    let mut ordered = Vec::with_capacity(manifest.tensors().len());
    for info in manifest.tensors() {
        let t = tensors
            .get(&info.name)
            .ok_or_else(|| Error::Consistency(format!("manifest references absent tensor {:?}", info.name)))?;
        if t.shape() != info.shape.as_slice() || t.dtype() != info.dtype {
            return Err(Error::Consistency(format!(
                "tensor {:?} is {:?} {}, index says {:?} {}",
                info.name,
                t.shape(),
                t.dtype(),
                info.shape,
                info.dtype
            )));
        }
        ordered.push((info, t));
    }
    let wr = |out: &mut dyn Write, bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::Io(e.to_string()));
    wr(out, &encode_header(manifest))?;
    let mut pos = 0u64;
    for (info, t) in ordered {
        wr(out, &vec![0u8; (info.offset - pos) as usize])?;
        wr(out, t.data())?;
        pos = info.offset + t.data().len() as u64;
    }
    out.flush().map_err(|e| Error::Io(e.to_string()))
}

/// Writes a container file. Identical inputs give identical bytes.
pub fn write_container(manifest: &Manifest, tensors: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(manifest, tensors, &mut w).map_err(|e| match e {
        Error::Io(msg) => Error::Io(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Bounded little-endian reader over the header bytes.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, what: &str) -> Result<&'a [u8]> {
        let left = (self.buf.len() - self.pos) as u64;
        if n > left {
            return Err(Error::Bounds(format!(
                "{what} needs {n} bytes at header offset {} but only {left} remain",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: u64, what: &str) -> Result<String> {
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    /// A count of items each at least `min_size` bytes, checked against
    /// what is left so a corrupt count cannot trigger a huge allocation.
    fn count(&mut self, min_size: u64, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_size) > left {
            return Err(Error::Bounds(format!(
                "{what} {n} cannot fit in the remaining {left} header bytes"
            )));
        }
        Ok(n as usize)
    }
}

/// Parses a header from the start of `buf`. Returns the manifest and the
/// byte offset of the data section.
pub fn decode_header(buf: &[u8]) -> Result<(Manifest, u64)> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let n_meta = c.count(13, "metadata count")?;
    let mut metadata = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let klen = c.u32("metadata key length")?;
        let key = c.utf8(klen as u64, "metadata key")?;
        let tag = c.u8("metadata type tag")?;
        let value = match tag {
            TAG_STR => {
                let len = c.u64("string length")?;
                MetaValue::Str(c.utf8(len, &format!("value of {key}"))?)
            }
            TAG_INT => MetaValue::Int(c.u64(&key)? as i64),
            TAG_FLOAT => MetaValue::Float(f64::from_bits(c.u64(&key)?)),
            TAG_LIST => {
                let n = c.count(8, &format!("length of {key}"))?;
                let mut vs = Vec::with_capacity(n);
                for _ in 0..n {
                    vs.push(c.u64(&key)? as i64);
                }
                MetaValue::IntList(vs)
            }
            other => return Err(Error::Format(format!("unknown metadata type tag {other} for {key:?}"))),
        };
        metadata.push((key, value));
    }
    let n_tensors = c.count(22, "tensor count")?;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let nlen = c.u32("tensor name length")?;
        let name = c.utf8(nlen as u64, "tensor name")?;
        let rank = c.u8(&name)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!(
                "tensor {name:?} has rank {rank}, expected 1..={MAX_RANK}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = c.u64(&name)?;
            if d == 0 || d > u32::MAX as u64 {
                return Err(Error::Format(format!("tensor {name:?} has dimension {d}")));
            }
            shape.push(d as usize);
        }
        let tag = c.u8(&name)?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("tensor {name:?} has unknown dtype tag {tag}")))?;
        let offset = c.u64(&name)?;
        tensors.push(TensorInfo {
            name,
            shape,
            dtype,
            offset,
        });
    }
    let data_start = align_up(c.pos as u64);
    let manifest = Manifest::from_parts(version, metadata, tensors);
    manifest.validate_layout()?;
    Ok((manifest, data_start))
}

/// An open container. Tensor payloads are read on demand with positional
/// reads, so one `Container` may serve loads from many threads.
#[derive(Debug)]
pub struct Container {
    path: PathBuf,
    file: File,
    manifest: Manifest,
    data_start: u64,
    file_len: u64,
}

impl Container {
    /// Opens and validates any IMPB file, such as an adapter.
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let file_len = file.metadata().map_err(|e| io_err(path, e))?.len();
        let mut header = Vec::new();
        let mut chunk = 64 * 1024u64;
        // grow the prefix until the header fits in it
        let (manifest, data_start) = loop {
            let want = chunk.min(file_len);
            header.resize(want as usize, 0);
            read_at(&file, &mut header, 0).map_err(|e| io_err(path, e))?;
            match decode_header(&header) {
                Err(Error::Bounds(_)) if want < file_len => chunk *= 4,
                other => break other?,
            }
        };
        if data_start > file_len {
            return Err(Error::Bounds(format!(
                "header padding ends at {data_start}, past the end of the {file_len}-byte file"
            )));
        }
        for t in manifest.tensors() {
            let end = data_start + t.offset + t.nbytes();
            if end > file_len {
                return Err(Error::Bounds(format!(
                    "tensor {:?} spans bytes {}..{end} but the file is {file_len} bytes",
                    t.name,
                    data_start + t.offset
                )));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            manifest,
            data_start,
            file_len,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn data_start(&self) -> u64 {
        self.data_start
    }

    pub fn file_len(&self) -> u64 {
        self.file_len
    }

    /// Every tensor, read into memory.
    pub fn load_all(&self) -> Result<imp_core::manifest::InMemoryModel> {
        let mut tensors = BTreeMap::new();
        for t in self.manifest.tensors() {
            tensors.insert(t.name.clone(), self.load(&t.name)?);
        }
        Ok(imp_core::manifest::InMemoryModel {
            manifest: self.manifest.clone(),
            tensors,
        })
    }
}

impl TensorSource for Container {
    fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn load(&self, name: &str) -> Result<Tensor> {
        let info = self
            .manifest
            .tensor(name)
            .ok_or_else(|| Error::Consistency(format!("container has no tensor {name:?}")))?;
        let mut data = vec![0u8; info.nbytes() as usize];
        read_at(&self.file, &mut data, self.data_start + info.offset)
            .map_err(|e| Error::Io(format!("{}: reading {name}: {e}", self.path.display())))?;
        Tensor::new(info.shape.clone(), info.dtype, data)
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    std::os::unix::fs::FileExt::read_exact_at(file, buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

/// Opens a model container: [`Container::open`] plus the required
/// architecture keys.
pub fn read_container(path: &Path) -> Result<Container> {
    let c = Container::open(path)?;
    c.manifest.validate_required()?;
    Ok(c)
}

/// Writes an in-memory model.
pub fn write_model(model: &imp_core::manifest::InMemoryModel, path: &Path) -> Result<()> {
    write_container(&model.manifest, &model.tensors, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DTypeTotal {
    pub tensors: usize,
    pub elements: u64,
    pub bytes: u64,
}

/// Byte accounting of one container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Inspection {
    pub name: Option<String>,
    pub precision: Option<String>,
    pub metadata_entries: usize,
    pub rows: Vec<TensorRow>,
    pub by_dtype: BTreeMap<&'static str, DTypeTotal>,
    /// Header including its trailing alignment padding.
    pub header_bytes: u64,
    pub payload_bytes: u64,
    /// Alignment gaps between tensor payloads.
    pub padding_bytes: u64,
    pub file_bytes: u64,
}

pub fn inspect_container(path: &Path) -> Result<Inspection> {
    Ok(inspect(&Container::open(path)?))
}

pub fn inspect(c: &Container) -> Inspection {
    let m = &c.manifest;
    let mut rows = Vec::new();
    let mut by_dtype: BTreeMap<&'static str, DTypeTotal> = BTreeMap::new();
    for t in m.tensors() {
        let bytes = t.nbytes();
        let e = by_dtype.entry(t.dtype.name()).or_insert(DTypeTotal {
            tensors: 0,
            elements: 0,
            bytes: 0,
        });
        e.tensors += 1;
        e.elements += t.shape.iter().product::<usize>() as u64;
        e.bytes += bytes;
        rows.push(TensorRow {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: t.dtype,
            bytes,
        });
    }
    let payload_bytes: u64 = rows.iter().map(|r| r.bytes).sum();
    let trailing = c.file_len - c.data_start - m.data_len();
    Inspection {
        name: m.get_str(keys::GENERAL_NAME).ok().flatten().map(str::to_string),
        precision: m.get_str(keys::GENERAL_PRECISION).ok().flatten().map(str::to_string),
        metadata_entries: m.metadata().len(),
        rows,
        by_dtype,
        header_bytes: c.data_start,
        payload_bytes,
        padding_bytes: m.data_len() - payload_bytes + trailing,
        file_bytes: c.file_len,
    }
}

impl std::fmt::Display for Inspection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(n) = &self.name {
            writeln!(f, "model      {n}")?;
        }
        if let Some(p) = &self.precision {
            writeln!(f, "precision  {p}")?;
        }
        writeln!(f, "metadata   {} entries", self.metadata_entries)?;
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        writeln!(f)?;
        writeln!(f, "{:<w$}  {:<18}  {:<5}  {:>12}", "name", "shape", "dtype", "bytes")?;
        for r in &self.rows {
            let shape = format!("{:?}", r.shape);
            writeln!(
                f,
                "{:<w$}  {:<18}  {:<5}  {:>12}",
                r.name,
                shape,
                r.dtype.name(),
                r.bytes
            )?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "{:<5}  {:>7}  {:>12}  {:>12}",
            "dtype", "tensors", "elements", "bytes"
        )?;
        for (d, t) in &self.by_dtype {
            writeln!(f, "{:<5}  {:>7}  {:>12}  {:>12}", d, t.tensors, t.elements, t.bytes)?;
        }
        writeln!(f)?;
        writeln!(f, "header     {:>12} bytes", self.header_bytes)?;
        writeln!(f, "payload    {:>12} bytes", self.payload_bytes)?;
        writeln!(f, "padding    {:>12} bytes", self.padding_bytes)?;
        write!(f, "total      {:>12} bytes", self.file_bytes)
    }
}
