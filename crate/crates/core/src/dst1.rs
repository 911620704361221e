//! DST1 tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0-3   magic "DST1"
//! u32         version (= 1)
//! u32         tensor count
//! per tensor:
//!   u32       name length in bytes
//!   [u8]      UTF-8 name
//!   u8        dtype code (0 = f32, 1 = f16, 2 = int4-packed, 3 = int32)
//!   u8        rank
//!   rank*u64  dims
//!   u64       data byte length
//!   [u8]      zero padding until the file offset is a multiple of 64
//!   [u8]      raw data (f32/f16/i32 little-endian; int4 packed two codes
//!             per byte, low nibble first, two's complement in [-8, 7])
//! ```
//!
//! Entries are written in caller order, so a fixed entry order gives a
//! byte-identical file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DsError, Result};
use crate::tensor::{Dtype, Tensor};

const MAGIC: &[u8; 4] = b"DST1";
const VERSION: u32 = 1;
const ALIGN: u64 = 64;

/// Ordered set of named tensors read from a DST1 file.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    entries: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Write named tensors in the given order. Names must be unique and nonempty.
pub fn save<P: AsRef<Path>>(path: P, entries: &[(&str, &Tensor)]) -> Result<()> {
    for (i, (name, _)) in entries.iter().enumerate() {
        if name.is_empty() {
            return Err(DsError::Format("empty tensor name".into()));
        }
        if entries[..i].iter().any(|(n, _)| n == name) {
            return Err(DsError::NameCollision(name.to_string()));
        }
    }

    let mut w = BufWriter::new(File::create(path)?);
    let mut pos: u64 = 0;

    let mut put = |w: &mut BufWriter<File>, pos: &mut u64, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes)?;
        *pos += bytes.len() as u64;
        Ok(())
    };

    put(&mut w, &mut pos, MAGIC)?;
    put(&mut w, &mut pos, &VERSION.to_le_bytes())?;
    put(&mut w, &mut pos, &(entries.len() as u32).to_le_bytes())?;

    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        put(&mut w, &mut pos, &(name_bytes.len() as u32).to_le_bytes())?;
        put(&mut w, &mut pos, name_bytes)?;
        put(&mut w, &mut pos, &[tensor.dtype().code()])?;
        let shape = tensor.shape();
        put(&mut w, &mut pos, &[shape.len() as u8])?;
        for &d in shape {
            put(&mut w, &mut pos, &(d as u64).to_le_bytes())?;
        }
        let data = tensor.data_bytes();
        put(&mut w, &mut pos, &(data.len() as u64).to_le_bytes())?;
        let pad = (ALIGN - pos % ALIGN) % ALIGN;
        put(&mut w, &mut pos, &vec![0u8; pad as usize])?;
        put(&mut w, &mut pos, &data)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a DST1 file; exact inverse of [`save`].
pub fn load<P: AsRef<Path>>(path: P) -> Result<TensorFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut pos: u64 = 0;

    fn read_exact(r: &mut BufReader<File>, pos: &mut u64, buf: &mut [u8]) -> Result<()> {
        r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                DsError::TruncatedFile
            } else {
                DsError::Io(e)
            }
        })?;
        *pos += buf.len() as u64;
        Ok(())
    }
    fn read_u32(r: &mut BufReader<File>, pos: &mut u64) -> Result<u32> {
        let mut b = [0u8; 4];
        read_exact(r, pos, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn read_u64(r: &mut BufReader<File>, pos: &mut u64) -> Result<u64> {
        let mut b = [0u8; 8];
        read_exact(r, pos, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut pos, &mut magic)?;
    if &magic != MAGIC {
        return Err(DsError::BadMagic);
    }
    let version = read_u32(&mut r, &mut pos)?;
    if version != VERSION {
        return Err(DsError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, &mut pos)?;

    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r, &mut pos)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut pos, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| DsError::Format("tensor name is not UTF-8".into()))?;
        if entries.iter().any(|(n, _): &(String, Tensor)| *n == name) {
            return Err(DsError::NameCollision(name));
        }

        let mut byte = [0u8; 1];
        read_exact(&mut r, &mut pos, &mut byte)?;
        let dtype = Dtype::from_code(byte[0])?;
        read_exact(&mut r, &mut pos, &mut byte)?;
        let rank = byte[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, &mut pos)? as usize);
        }
        let byte_len = read_u64(&mut r, &mut pos)? as usize;

        let pad = ((ALIGN - pos % ALIGN) % ALIGN) as usize;
        let mut pad_buf = vec![0u8; pad];
        read_exact(&mut r, &mut pos, &mut pad_buf)?;

        let mut data = vec![0u8; byte_len];
        read_exact(&mut r, &mut pos, &mut data)?;
        let tensor = Tensor::from_data_bytes(shape, dtype, &data)?;
        entries.push((name, tensor));
    }

    Ok(TensorFile { entries })
}
