//! Binary store of keyed f32 vectors, shared by the embedding cache and the
//! checkpoint's passage embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "PRAISEEM"
//! 8       4     version (1)
//! 12      4     dimension d
//! 16      8     record count
//! 24      1     dtype (1 = f32 little-endian)
//! 25      7     reserved, zero
//! 32      ...   records: 32-byte key, then d * 4 bytes of vector
//! ```

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PRAISEEM";
pub const VERSION: u32 = 1;
pub const DTYPE_F32_LE: u8 = 1;
pub const HEADER_LEN: usize = 32;
const COUNT_OFFSET: u64 = 16;

pub type Key = [u8; 32];

fn header(dim: usize, count: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..8].copy_from_slice(MAGIC);
    h[8..12].copy_from_slice(&VERSION.to_le_bytes());
    h[12..16].copy_from_slice(&(dim as u32).to_le_bytes());
    h[16..24].copy_from_slice(&count.to_le_bytes());
    h[24] = DTYPE_F32_LE;
    h
}

fn encode_record(buf: &mut Vec<u8>, key: &Key, values: &[f32]) {
    buf.extend_from_slice(key);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a whole vector file into memory.
pub fn encode(dim: usize, records: &[(Key, &[f32])]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(HEADER_LEN + records.len() * (32 + 4 * dim));
    buf.extend_from_slice(&header(dim, records.len() as u64));
    for (key, values) in records {
        if values.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: values.len(),
            });
        }
        encode_record(&mut buf, key, values);
    }
    Ok(buf)
}

/// Parse a vector file. A trailing partial record (interrupted append) is ignored.
pub fn decode(bytes: &[u8]) -> std::result::Result<(usize, Vec<(Key, Vec<f32>)>), String> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    if bytes[24] != DTYPE_F32_LE {
        return Err(format!("unsupported dtype {}", bytes[24]));
    }
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let rec_len = 32 + 4 * dim;
    let available = (bytes.len() - HEADER_LEN) / rec_len;
    if available < count {
        return Err(format!(
            "header claims {count} records, file holds {available}"
        ));
    }
    let records = (0..count)
        .map(|i| {
            let rec = &bytes[HEADER_LEN + i * rec_len..HEADER_LEN + (i + 1) * rec_len];
            let key: Key = rec[..32].try_into().unwrap();
            let values = rec[32..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            (key, values)
        })
        .collect();
    Ok((dim, records))
}

pub fn read_file(path: &Path) -> Result<(usize, Vec<(Key, Vec<f32>)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::checkpoint(path, reason))
}

/// Append-only writer that keeps the header count current.
pub struct Appender {
    path: PathBuf,
    file: File,
    dim: usize,
    count: u64,
}

impl Appender {
    /// Open (creating if absent) and return the records already present.
    pub fn open(path: &Path, dim: usize) -> Result<(Self, Vec<(Key, Vec<f32>)>)> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let existing = if bytes.is_empty() {
            file.write_all(&header(dim, 0))
                .map_err(|e| Error::io(path, e))?;
            Vec::new()
        } else {
            let (file_dim, records) = decode(&bytes).map_err(|r| Error::checkpoint(path, r))?;
            if file_dim != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: file_dim,
                });
            }
            records
        };
        let end = (HEADER_LEN + existing.len() * (32 + 4 * dim)) as u64;
        file.set_len(end).map_err(|e| Error::io(path, e))?;
        let count = existing.len() as u64;
        Ok((
            Appender {
                path: path.to_owned(),
                file,
                dim,
                count,
            },
            existing,
        ))
    }

    pub fn append(&mut self, key: &Key, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: values.len(),
            });
        }
        let mut buf = Vec::with_capacity(32 + 4 * self.dim);
        encode_record(&mut buf, key, values);
        let io = |e| Error::io(&self.path, e);
        self.file.seek(SeekFrom::End(0)).map_err(io)?;
        self.file.write_all(&buf).map_err(io)?;
        self.count += 1;
        self.file.seek(SeekFrom::Start(COUNT_OFFSET)).map_err(io)?;
        self.file.write_all(&self.count.to_le_bytes()).map_err(io)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode(3, &[([7u8; 32], &[1.0, -2.0, 0.5][..])]).unwrap();
        assert_eq!(&bytes[..8], b"PRAISEEM");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1);
        assert_eq!(bytes[24], 1);
        assert_eq!(bytes.len(), 32 + 32 + 12);
        assert_eq!(&bytes[64..68], &1.0f32.to_le_bytes());
        let (dim, recs) = decode(&bytes).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(recs, vec![([7u8; 32], vec![1.0, -2.0, 0.5])]);
    }

    #[test]
    fn appender_survives_reopen_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        {
            let (mut a, existing) = Appender::open(&path, 2).unwrap();
            assert!(existing.is_empty());
            a.append(&[1u8; 32], &[0.6, 0.8]).unwrap();
            a.append(&[2u8; 32], &[1.0, 0.0]).unwrap();
        }
        // simulate an interrupted append
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[9u8; 10]).unwrap();
        drop(f);
        let (mut a, existing) = Appender::open(&path, 2).unwrap();
        assert_eq!(existing.len(), 2);
        a.append(&[3u8; 32], &[0.0, 1.0]).unwrap();
        let (_, recs) = read_file(&path).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].1, vec![0.0, 1.0]);
        assert!(Appender::open(&path, 4).is_err());
    }
}
