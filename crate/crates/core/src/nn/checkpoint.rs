//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SFTW" | version u16 | entries until EOF
//! entry: name_len u16 | name (utf-8) | rows u32 | cols u32 | rows*cols f32
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFTW";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<'a, W, I>(mut w: W, entries: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (String, &'a Matrix)>,
{
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, m) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.len() * 4);
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Matrix)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?
            .to_owned();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let payload = cur.take(rows * cols * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(entries)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[&[1.0, 2.0]]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("ab".to_string(), &m)]).unwrap();
        assert_eq!(&buf[..4], b"SFTW");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[2, 0]);
        assert_eq!(&buf[8..10], b"ab");
        assert_eq!(&buf[10..14], &[1, 0, 0, 0]);
        assert_eq!(&buf[14..18], &[2, 0, 0, 0]);
        assert_eq!(&buf[18..22], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 26);
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, vec![("ab".to_string(), m)]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let m = Matrix::zeros(2, 2);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w".to_string(), &m)]).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
