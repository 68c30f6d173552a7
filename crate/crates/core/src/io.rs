//! File formats.
//!
//! Embeddings (`CRV1`), all integers little-endian:
//!
//! ```text
//! magic  "CRV1"            4 bytes
//! dim    u32
//! count  u64
//! ids    count x (u32 byte length, UTF-8 bytes)
//! rows   count x dim x f32, row-major
//! ```
//!
//! Everything else (corpus, judgments, ranked lists, mined negatives) is
//! JSON lines, one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{l2_norm_f32, EmbeddingMatrix, UNIT_NORM_TOLERANCE};

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"CRV1";

/// Upper bound on a single id, to fail fast on corrupt length prefixes.
const MAX_ID_BYTES: u32 = 1 << 16;

pub fn write_embeddings<W: Write>(m: &EmbeddingMatrix, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    w.write_all(EMBEDDINGS_MAGIC)?;
    let dim = u32::try_from(m.dim()).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(m.len() as u64).to_le_bytes())?;
    for id in m.ids() {
        let len = u32::try_from(id.len()).map_err(|_| Error::Format("id too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    for &x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a `CRV1` stream. Rows further than the unit tolerance from length one
/// are normalized here; zero or non-finite rows are a format error.
pub fn read_embeddings<R: Read>(input: R) -> Result<EmbeddingMatrix> {
    let mut r = BufReader::new(input);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != EMBEDDINGS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"CRV1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b4, "dim")?;
    let dim = u32::from_le_bytes(b4) as usize;
    if dim == 0 {
        return Err(Error::Format("dimension is zero".into()));
    }
    read_exact(&mut r, &mut b8, "count")?;
    let count = usize::try_from(u64::from_le_bytes(b8))
        .map_err(|_| Error::Format("count does not fit in memory".into()))?;

    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        read_exact(&mut r, &mut b4, "id length")?;
        let len = u32::from_le_bytes(b4);
        if len > MAX_ID_BYTES {
            return Err(Error::Format(format!(
                "id #{i} has implausible length {len}"
            )));
        }
        let mut buf = vec![0u8; len as usize];
        read_exact(&mut r, &mut buf, "id bytes")?;
        ids.push(
            String::from_utf8(buf).map_err(|_| Error::Format(format!("id #{i} is not UTF-8")))?,
        );
    }

    let mut data = Vec::with_capacity(count.saturating_mul(dim).min(1 << 26));
    let mut row = vec![0f32; dim];
    for i in 0..count {
        for x in row.iter_mut() {
            read_exact(&mut r, &mut b4, "vector data")?;
            *x = f32::from_le_bytes(b4);
        }
        let norm = l2_norm_f32(&row);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Format(format!(
                "row `{}` is zero or not finite",
                ids[i]
            )));
        }
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            data.extend(row.iter().map(|&x| (f64::from(x) / norm) as f32));
        } else {
            data.extend_from_slice(&row);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after vector data".into()));
    }
    EmbeddingMatrix::new(dim, ids, data).map_err(|e| match e {
        Error::DuplicateId(id) => Error::DuplicateId(id),
        other => Error::Format(other.to_string()),
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    read_embeddings(open(path)?)
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    write_embeddings(m, create(path)?)
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Parse JSON lines, skipping blank lines. Errors name the line number.
pub fn read_jsonl<T: DeserializeOwned, R: Read>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(records: &[T], out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(open(path)?)
}

pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    write_jsonl(records, create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows_normalized(
            3,
            vec!["a".into(), "β".into()],
            &[vec![1.0, 2.0, 2.0], vec![0.0, -1.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn header_layout_is_exact() {
        let mut buf = Vec::new();
        write_embeddings(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CRV1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 1);
        assert_eq!(buf[20], b'a');
        // "β" is two UTF-8 bytes
        assert_eq!(u32::from_le_bytes(buf[21..25].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 16 + 5 + 6 + 2 * 3 * 4);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_embeddings(&sample(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        let err = read_embeddings(&bad[..]).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
        let err = read_embeddings(&buf[..buf.len() - 1])
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "{err}");
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_embeddings(&extra[..]).is_err());
    }

    #[test]
    fn unnormalized_rows_are_normalized_on_ingest() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"CRV1");
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(b'x');
        buf.extend_from_slice(&3f32.to_le_bytes());
        buf.extend_from_slice(&4f32.to_le_bytes());
        let m = read_embeddings(&buf[..]).unwrap();
        assert!((m.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((m.row(0)[1] - 0.8).abs() < 1e-7);
    }

    proptest! {
        #[test]
        fn embeddings_round_trip(rows in proptest::collection::vec(
            proptest::collection::vec(0.1f64..1.0, 4), 1..20)) {
            let ids: Vec<String> = (0..rows.len()).map(|i| format!("id{i}")).collect();
            let m = EmbeddingMatrix::from_rows_normalized(4, ids, &rows).unwrap();
            let mut buf = Vec::new();
            write_embeddings(&m, &mut buf).unwrap();
            prop_assert_eq!(read_embeddings(&buf[..]).unwrap(), m);
        }
    }
}
