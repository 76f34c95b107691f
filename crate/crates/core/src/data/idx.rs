//! Reader for the IDX binary format used by the MNIST distribution.

use std::path::Path;

use crate::error::{io_err, Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw images from an IDX3 file: `count` images of `rows x cols` bytes.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let Some(b) = self.bytes.get(self.pos..self.pos + 4) else {
            return Err(self.err("file ends inside the header"));
        };
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32()?;
        if m != expected {
            self.pos -= 4;
            return Err(self.err(format!("bad magic {m:#010x}, expected {expected:#010x}")));
        }
        Ok(())
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < len {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                message: format!("truncated payload: expected {len} bytes, found {have}"),
            });
        }
        if have > len {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: (self.pos + len) as u64,
                message: format!("{} trailing bytes after payload", have - len),
            });
        }
        Ok(&self.bytes[self.pos..])
    }
}

pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<IdxImages> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.magic(IMAGE_MAGIC)?;
    let count = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    let pixels = c.payload(count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.magic(LABEL_MAGIC)?;
    let count = c.u32()? as usize;
    let labels = c.payload(count)?;
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (8 + i) as u64,
            message: format!("label {} outside 0..=9", labels[i]),
        });
    }
    Ok(labels.to_vec())
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_images(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_labels(path, &bytes)
}
