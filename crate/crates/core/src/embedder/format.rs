//! On-disk embedding tables.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "NESE" | u32 version = 1 | u32 record count n | u32 dimension d
//! n × ( u16 key length | key bytes (UTF-8) | d × f32 )
//! ```
//!
//! The line-delimited form holds one `{"key": …, "vector": […]}` JSON object
//! per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FileEmbeddings;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: [u8; 4] = *b"NESE";
pub const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingFormat {
    Binary,
    Lines,
}

/// Decides the format from the first four bytes of the file.
pub fn sniff_format(path: &Path) -> Result<EmbeddingFormat> {
    let mut head = [0u8; 4];
    let mut file = File::open(path)?;
    let mut read = 0;
    while read < head.len() {
        let n = file.read(&mut head[read..])?;
        if n == 0 {
            break;
        }
        read += n;
    }
    Ok(if read == 4 && head == BINARY_MAGIC {
        EmbeddingFormat::Binary
    } else {
        EmbeddingFormat::Lines
    })
}

pub fn load_embedding_file(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<FileEmbeddings> {
    let reader = BufReader::new(File::open(path)?);
    let (dim, records) = match format {
        EmbeddingFormat::Binary => read_binary(reader)?,
        EmbeddingFormat::Lines => read_lines(reader)?,
    };
    FileEmbeddings::from_entries(dim, records)
}

pub fn write_embedding_file(path: impl AsRef<Path>, table: &FileEmbeddings, format: EmbeddingFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let records = table.iter().map(|(k, v)| (k, v.values()));
    match format {
        EmbeddingFormat::Binary => write_binary(&mut out, table.dim, records)?,
        EmbeddingFormat::Lines => write_lines(&mut out, records)?,
    }
    out.flush()?;
    Ok(())
}

fn eof_as_format(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::format("truncated binary embedding file")
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(eof_as_format)?;
    Ok(u32::from_le_bytes(buf))
}

/// Dimension and raw `(key, vector)` records of an embedding table.
pub type RawTable = (usize, Vec<(String, Vec<f32>)>);

/// Reads a binary table, returning its dimension and raw records.
pub fn read_binary<R: Read>(mut r: R) -> Result<RawTable> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_format)?;
    if magic != BINARY_MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != BINARY_VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(Error::format("dimension must be positive"));
    }

    let mut records = Vec::with_capacity(n.min(1 << 16));
    let mut value = [0u8; 4];
    for i in 0..n {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(eof_as_format)?;
        let mut key = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut key).map_err(eof_as_format)?;
        let key = String::from_utf8(key).map_err(|_| Error::format(format!("record {i}: key is not UTF-8")))?;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut value).map_err(eof_as_format)?;
            let v = f32::from_le_bytes(value);
            if !v.is_finite() {
                return Err(Error::format(format!("record {i} ({key:?}): non-finite value")));
            }
            vector.push(v);
        }
        records.push((key, vector));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after last record"));
    }
    Ok((dim, records))
}

pub fn write_binary<'a, W, I>(w: &mut W, dim: usize, records: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let records: Vec<_> = records.into_iter().collect();
    let count = u32::try_from(records.len()).map_err(|_| Error::format("too many records"))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::format("dimension too large"))?;
    w.write_all(&BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim32.to_le_bytes())?;
    for (key, values) in records {
        let len = u16::try_from(key.len()).map_err(|_| Error::format(format!("key longer than {} bytes", u16::MAX)))?;
        if values.len() != dim {
            return Err(Error::dims(dim, values.len()));
        }
        w.write_all(&len.to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LineRecord<'a> {
    #[serde(borrow)]
    key: std::borrow::Cow<'a, str>,
    vector: std::borrow::Cow<'a, [f32]>,
}

/// Reads JSON-lines records. The dimension is taken from the first record,
/// so a file without records cannot be read.
pub fn read_lines<R: BufRead>(r: R) -> Result<RawTable> {
    let mut dim = None;
    let mut records = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LineRecord<'_> =
            serde_json::from_str(&line).map_err(|e| Error::format(format!("line {}: {e}", lineno + 1)))?;
        let vector = rec.vector.into_owned();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("line {}: non-finite value", lineno + 1)));
        }
        let expected = *dim.get_or_insert(vector.len());
        if vector.len() != expected {
            return Err(Error::format(format!(
                "line {}: dimension {} differs from {expected}",
                lineno + 1,
                vector.len()
            )));
        }
        records.push((rec.key.into_owned(), vector));
    }
    let dim = dim.ok_or_else(|| Error::format("no records; dimension unknown"))?;
    Ok((dim, records))
}

pub fn write_lines<'a, W, I>(w: &mut W, records: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    for (key, values) in records {
        let rec = LineRecord {
            key: key.into(),
            vector: values.into(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
