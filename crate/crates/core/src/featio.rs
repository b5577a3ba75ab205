//! Reader and writer for `.lluf` feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header   magic "LLUF" | version u32 (=1) | kind u8 | dim u32 | count u32 | n_classes u32
//! names    n_classes x (len u16, UTF-8 bytes)
//! records  kind 0: count x (label u32, dim x f32)
//!          kind 1: count x (dim x f32), count == n_classes, class order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{LluError, Result};
use crate::vector::{
    l2_norm, ClassEmbeddingSet, FeatureRecord, FeatureSet, UnitVector,
};

pub const MAGIC: [u8; 4] = *b"LLUF";
pub const VERSION: u32 = 1;
pub const KIND_LABELED: u8 = 0;
pub const KIND_CLASSES: u8 = 1;
const HEADER_LEN: usize = 21;
const NORM_RANGE: (f64, f64) = (0.99, 1.01);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub kind: u8,
    pub dim: u32,
    pub count: u32,
    pub n_classes: u32,
}

/// Contents of a feature file.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureFile {
    Labeled(FeatureSet),
    Classes(ClassEmbeddingSet),
}

impl FeatureFile {
    fn kind_name(&self) -> &'static str {
        match self {
            FeatureFile::Labeled(_) => "labeled-feature",
            FeatureFile::Classes(_) => "class-embedding",
        }
    }
}

impl From<FeatureSet> for FeatureFile {
    fn from(s: FeatureSet) -> Self {
        FeatureFile::Labeled(s)
    }
}

impl From<ClassEmbeddingSet> for FeatureFile {
    fn from(s: ClassEmbeddingSet) -> Self {
        FeatureFile::Classes(s)
    }
}

/// What the reader makes of stored values: widened and divided by their norm.
fn reread(q: &[f32]) -> Vec<f32> {
    let wide: Vec<f64> = q.iter().map(|&x| x as f64).collect();
    let norm = l2_norm(&wide);
    wide.iter().map(|&x| (x / norm) as f32).collect()
}

/// Moves one component by one ulp so that the squared norm gets closest to 1.
/// Returns false when no single move helps.
fn nudge(q: &mut [f32]) -> bool {
    let sq: f64 = q.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let mut best = (sq - 1.0).abs();
    let mut choice = None;
    for (i, &x) in q.iter().enumerate() {
        for y in [x.next_up(), x.next_down()] {
            let moved = sq - (x as f64) * (x as f64) + (y as f64) * (y as f64);
            if (moved - 1.0).abs() < best {
                best = (moved - 1.0).abs();
                choice = Some((i, y));
            }
        }
    }
    match choice {
        Some((i, y)) => {
            q[i] = y;
            true
        }
        None => false,
    }
}

/// Rounds a unit vector to f32 values the reader maps back onto themselves,
/// so that reading and rewriting a file reproduces its bytes.
fn quantize(v: &UnitVector) -> Vec<f32> {
    let mut q: Vec<f32> = v.as_slice().iter().map(|&x| x as f32).collect();
    for _ in 0..64 {
        let again = reread(&q);
        if again == q {
            break;
        }
        if !nudge(&mut q) {
            q = again;
        }
    }
    q
}

fn put_header(buf: &mut Vec<u8>, kind: u8, dim: usize, count: usize, names: &[String]) -> Result<()> {
    if dim < 2 {
        return Err(LluError::InvalidSet(format!("dim {dim} < 2")));
    }
    let to_u32 = |x: usize, what: &str| {
        u32::try_from(x).map_err(|_| LluError::InvalidSet(format!("{what} {x} exceeds u32")))
    };
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind);
    buf.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(count, "count")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(names.len(), "n_classes")?.to_le_bytes());
    for name in names {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| LluError::InvalidSet(format!("class name `{name}` too long")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    Ok(())
}

fn put_vector(buf: &mut Vec<u8>, v: &UnitVector) {
    for x in quantize(v) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(file: &FeatureFile) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    match file {
        FeatureFile::Labeled(set) => {
            put_header(&mut buf, KIND_LABELED, set.dim(), set.len(), set.class_names())?;
            buf.reserve(set.len() * (4 + 4 * set.dim()));
            for r in set.records() {
                let label = u32::try_from(r.label)
                    .map_err(|_| LluError::InvalidSet(format!("label {} exceeds u32", r.label)))?;
                buf.extend_from_slice(&label.to_le_bytes());
                put_vector(&mut buf, &r.vector);
            }
        }
        FeatureFile::Classes(set) => {
            put_header(&mut buf, KIND_CLASSES, set.dim(), set.len(), set.class_names())?;
            buf.reserve(set.len() * 4 * set.dim());
            for v in set.vectors() {
                put_vector(&mut buf, v);
            }
        }
    }
    Ok(buf)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| LluError::Io(e.error))?;
    Ok(())
}

pub fn write_features(file: &FeatureFile, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(file)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn write_feature_set(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    write_features(&FeatureFile::Labeled(set.clone()), path)
}

pub fn write_class_embeddings(set: &ClassEmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    write_features(&FeatureFile::Classes(set.clone()), path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(LluError::CorruptRecord {
                offset: self.pos as u64,
                reason: format!("truncated {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn vector(&mut self, dim: usize, index: usize) -> Result<UnitVector> {
        let raw = self.take(4 * dim, "vector")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let norm = l2_norm(&values);
        if !(norm >= NORM_RANGE.0 && norm <= NORM_RANGE.1) {
            return Err(LluError::UnnormalizedVector { index, norm });
        }
        Ok(UnitVector::from_normalized(
            values.iter().map(|x| x / norm).collect(),
        ))
    }
}

fn corrupt(offset: usize, reason: impl Into<String>) -> LluError {
    LluError::CorruptRecord {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<FeatureFileHeader> {
    if bytes.len() < 4 {
        return Err(corrupt(0, "truncated header"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(LluError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(bytes.len(), "truncated header"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(LluError::UnsupportedVersion(version));
    }
    let header = FeatureFileHeader {
        version,
        kind: bytes[8],
        dim: u32_at(9),
        count: u32_at(13),
        n_classes: u32_at(17),
    };
    if header.kind > KIND_CLASSES {
        return Err(corrupt(8, format!("unknown kind {}", header.kind)));
    }
    if header.dim < 2 {
        return Err(corrupt(9, format!("dim {} < 2", header.dim)));
    }
    if header.kind == KIND_CLASSES && header.count != header.n_classes {
        return Err(corrupt(
            13,
            format!("class file count {} != n_classes {}", header.count, header.n_classes),
        ));
    }
    Ok(header)
}

pub fn decode(bytes: &[u8]) -> Result<FeatureFile> {
    let header = decode_header(bytes)?;
    let mut cur = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    let mut names = Vec::with_capacity(header.n_classes as usize);
    for _ in 0..header.n_classes {
        let at = cur.pos;
        let len = cur.u16("name length")? as usize;
        let raw = cur.take(len, "class name")?;
        let name = std::str::from_utf8(raw).map_err(|_| corrupt(at, "class name is not UTF-8"))?;
        names.push(name.to_owned());
    }

    let dim = header.dim as usize;
    let count = header.count as usize;
    let record_len = 4 * dim + if header.kind == KIND_LABELED { 4 } else { 0 };
    let expected = (cur.pos as u64) + (count as u64) * (record_len as u64);
    if expected != bytes.len() as u64 {
        return Err(corrupt(
            cur.pos,
            format!(
                "declared {count} records of {record_len} bytes need {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }

    let invalid = |e: LluError, at: usize| match e {
        LluError::InvalidSet(reason) => corrupt(at, reason),
        other => other,
    };
    if header.kind == KIND_LABELED {
        let n_classes = names.len();
        let mut records = Vec::with_capacity(count);
        for index in 0..count {
            let label = cur.u32("label")? as usize;
            if label >= n_classes {
                return Err(LluError::LabelOutOfRange { label, n_classes });
            }
            let vector = cur.vector(dim, index)?;
            records.push(FeatureRecord { vector, label });
        }
        FeatureSet::new(dim, names, records)
            .map(FeatureFile::Labeled)
            .map_err(|e| invalid(e, HEADER_LEN))
    } else {
        let vectors = (0..count)
            .map(|i| cur.vector(dim, i))
            .collect::<Result<Vec<_>>>()?;
        ClassEmbeddingSet::new(dim, names, vectors)
            .map(FeatureFile::Classes)
            .map_err(|e| invalid(e, HEADER_LEN))
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    decode(&fs::read(path)?)
}

pub fn read_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    match read_features(path)? {
        FeatureFile::Labeled(s) => Ok(s),
        other => Err(LluError::KindMismatch {
            expected: "labeled-feature",
            found: other.kind_name(),
        }),
    }
}

pub fn read_class_embeddings(path: impl AsRef<Path>) -> Result<ClassEmbeddingSet> {
    match read_features(path)? {
        FeatureFile::Classes(s) => Ok(s),
        other => Err(LluError::KindMismatch {
            expected: "class-embedding",
            found: other.kind_name(),
        }),
    }
}
