//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "STNT" | version: u32
//! repeated until EOF:
//!   id_len: u32 | id: [u8; id_len] (UTF-8) | rank: u32 | dims: [u64; rank] | data: [f64; Π dims]
//! ```
//!
//! A strategy checkpoint starts with a header record whose identifier is
//! `#strategy:<kind>` holding a single value, the number of trained tasks.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STNT";
pub const CHECKPOINT_VERSION: u32 = 1;
const STRATEGY_PREFIX: &str = "#strategy:";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Strategy kind and trained-task count, when written by a strategy.
    pub strategy: Option<(String, usize)>,
    pub entries: Vec<(String, Tensor)>,
}

fn put_record(w: &mut impl Write, id: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    if let Some((kind, tasks)) = &ckpt.strategy {
        put_record(w, &format!("{STRATEGY_PREFIX}{kind}"), &Tensor::scalar(*tasks as f64))?;
    }
    for (id, t) in &ckpt.entries {
        put_record(w, id, t)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected STNT".into(),
        });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let mut ckpt = Checkpoint {
        strategy: None,
        entries: Vec::new(),
    };
    while c.pos < buf.len() {
        let start = c.pos as u64;
        let len = c.u32("identifier length")? as usize;
        let id = std::str::from_utf8(c.take(len, "identifier")?)
            .map_err(|_| Error::Format {
                offset: start + 4,
                detail: "identifier is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format {
                offset: start,
                detail: "dimension product overflows".into(),
            })?;
        let bytes = c.take(n.saturating_mul(8), "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: start,
            detail: e.to_string(),
        })?;
        match id.strip_prefix(STRATEGY_PREFIX) {
            Some(kind) if ckpt.strategy.is_none() && ckpt.entries.is_empty() => {
                ckpt.strategy = Some((kind.to_string(), t.item() as usize));
            }
            _ => ckpt.entries.push((id, t)),
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            strategy: Some(("sidetune".into(), 3)),
            entries: vec![
                (
                    "base.0.weight".into(),
                    Tensor::new(vec![2, 3], vec![1.5, -0.0, 3.25, f64::MIN_POSITIVE, 1e300, -7.0]).unwrap(),
                ),
                ("base.0.bias".into(), Tensor::from_vec(vec![0.1, 0.2, 0.3])),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_checkpoint(
            &mut buf,
            &Checkpoint {
                strategy: None,
                entries: vec![],
            },
        )
        .unwrap();
        assert_eq!(buf, [b'S', b'T', b'N', b'T', 1, 0, 0, 0]);
    }

    #[test]
    fn bit_exact_roundtrip() {
        let ckpt = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.strategy, ckpt.strategy);
        for ((a, ta), (b, tb)) in ckpt.entries.iter().zip(&back.entries) {
            assert_eq!(a, b);
            assert!(ta.bit_eq(tb));
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        buf.truncate(buf.len() - 3);
        match read_checkpoint(&mut buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert!(offset > 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            read_checkpoint(&mut buf.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
