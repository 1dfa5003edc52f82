//! Packed image/caption shard (little-endian):
//!
//! ```text
//! "AFLY"  u32 version=1  u32 record_count
//! per record: u32 C  u32 H  u32 W  f32 pixels[C·H·W]  u32 caption_len  caption (UTF-8)
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::ImageTextPair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AFLY";
const VERSION: u32 = 1;

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

pub fn encode_shard(records: &[ImageTextPair]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    out.write_u32::<LE>(u32_of(records.len(), "record count")?).unwrap();
    for (i, rec) in records.iter().enumerate() {
        rec.validate().map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
        let shape = rec.image.shape();
        if shape.len() != 3 {
            return Err(Error::Format(format!("record {i}: image must be C×H×W, got {shape:?}")));
        }
        for &d in shape {
            out.write_u32::<LE>(u32_of(d, "dimension")?).unwrap();
        }
        for &p in rec.image.data() {
            out.write_f32::<LE>(p).unwrap();
        }
        let cap = rec.caption.as_bytes();
        out.write_u32::<LE>(u32_of(cap.len(), "caption length")?).unwrap();
        out.extend_from_slice(cap);
    }
    Ok(out)
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<ImageTextPair>> {
    let eof = |e| Error::io("<shard>", e);
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad shard magic {magic:?}")));
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported shard version {version}")));
    }
    let count = r.read_u32::<LE>().map_err(eof)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let mut shape = [0usize; 3];
        for d in &mut shape {
            *d = r.read_u32::<LE>().map_err(eof)? as usize;
        }
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(4) > bytes.len() - r.position() as usize {
            return Err(eof(std::io::ErrorKind::UnexpectedEof.into()));
        }
        let mut pixels = vec![0f32; numel];
        r.read_f32_into::<LE>(&mut pixels).map_err(eof)?;
        let len = r.read_u32::<LE>().map_err(eof)? as usize;
        if len > bytes.len() - r.position() as usize {
            return Err(eof(std::io::ErrorKind::UnexpectedEof.into()));
        }
        let mut cap = vec![0u8; len];
        r.read_exact(&mut cap).map_err(eof)?;
        let caption =
            String::from_utf8(cap).map_err(|_| Error::Format(format!("record {i}: caption is not UTF-8")))?;
        let image = Tensor::from_vec(shape.to_vec(), pixels).map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        let rec = ImageTextPair { image, caption };
        rec.validate().map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
        records.push(rec);
    }
    if r.position() as usize != bytes.len() {
        return Err(Error::Format("trailing bytes after shard".into()));
    }
    Ok(records)
}

pub fn write_shard(path: impl AsRef<Path>, records: &[ImageTextPair]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_shard(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<Vec<ImageTextPair>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_shard(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}
