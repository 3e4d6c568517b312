//! `<instruction tokens, coverage vector>` training pairs.
//!
//! The interchange format is JSON lines, one `{"cov":[22 floats],"tokens":[bytes]}`
//! object per line. A dense binary variant exists for large local runs.

use std::io::{self, BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dut::GROUPS;
use crate::generators::CoverageVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    /// Global coverage observed just before the instruction retired.
    pub cov: CoverageVector,
    pub tokens: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("record {index} is truncated")]
    TruncatedRecord { index: usize },
    #[error("record {index}: {reason}")]
    Schema { index: usize, reason: String },
    #[error("unsupported dataset version {0}")]
    Version(u16),
}

impl DatasetRecord {
    fn check(&self, index: usize) -> Result<(), DatasetError> {
        if !self.cov.is_valid() {
            return Err(DatasetError::Schema {
                index,
                reason: "coverage component outside [0, 1]".into(),
            });
        }
        if self.tokens.is_empty() || self.tokens.len() > 6 {
            return Err(DatasetError::Schema {
                index,
                reason: format!("{} tokens, expected 1..=6", self.tokens.len()),
            });
        }
        Ok(())
    }
}

pub fn emit_dataset<'a, W: Write>(mut w: W, records: impl IntoIterator<Item = &'a DatasetRecord>) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Streaming reader over a JSONL dataset.
pub struct DatasetReader<R> {
    inner: R,
    index: usize,
    line: String,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(inner: R) -> Self {
        DatasetReader {
            inner,
            index: 0,
            line: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<DatasetRecord, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line.clear();
            match self.inner.read_line(&mut self.line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            if self.line.trim().is_empty() {
                continue;
            }
            let index = self.index;
            self.index += 1;
            let complete = self.line.ends_with('\n');
            let parsed = serde_json::from_str::<DatasetRecord>(&self.line);
            return Some(match parsed {
                Ok(rec) => rec.check(index).map(|_| rec),
                Err(e) if !complete && e.is_eof() => Err(DatasetError::TruncatedRecord { index }),
                Err(e) if !complete && e.is_syntax() => Err(DatasetError::TruncatedRecord { index }),
                Err(e) => Err(DatasetError::Schema {
                    index,
                    reason: e.to_string(),
                }),
            });
        }
    }
}

pub fn load_dataset<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    DatasetReader::new(r).collect()
}

const BIN_MAGIC: &[u8; 4] = b"LYRD";
const BIN_VERSION: u16 = 1;

/// `"LYRD" | version u16 | count u64 | count × (22 × f32, len u8, tokens)`.
pub fn emit_binary<W: Write>(mut w: W, records: &[DatasetRecord]) -> io::Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_u16::<LittleEndian>(BIN_VERSION)?;
    w.write_u64::<LittleEndian>(records.len() as u64)?;
    for r in records {
        for v in r.cov.0 {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.write_u8(r.tokens.len() as u8)?;
        w.write_all(&r.tokens)?;
    }
    Ok(())
}

pub fn load_binary<R: Read>(mut r: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(DatasetError::Schema {
            index: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != BIN_VERSION {
        return Err(DatasetError::Version(version));
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    let truncated = |index| move |e: io::Error| match e.kind() {
        io::ErrorKind::UnexpectedEof => DatasetError::TruncatedRecord { index },
        _ => DatasetError::Io(e),
    };
    for index in 0..n {
        let mut cov = [0f32; GROUPS];
        for v in cov.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(truncated(index))?;
        }
        let len = r.read_u8().map_err(truncated(index))? as usize;
        let mut tokens = vec![0u8; len];
        r.read_exact(&mut tokens).map_err(truncated(index))?;
        let rec = DatasetRecord {
            cov: CoverageVector::from_f32(cov),
            tokens,
        };
        rec.check(index)?;
        out.push(rec);
    }
    Ok(out)
}
