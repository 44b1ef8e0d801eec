//! Little-endian weight file.
//!
//! ```text
//! magic        8 bytes   "CMPESE01"
//! spec_hash    u64
//! tensor_count u32
//! per tensor:
//!   name_len   u32, then name_len bytes of UTF-8
//!   rank       u32, then rank × u32 extents
//!   values     product(extents) × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CMPESE01";

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub spec_hash: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl WeightFile {
    pub fn new(spec_hash: u64) -> Self {
        WeightFile {
            spec_hash,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.spec_hash.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn decode<R: Read>(r: R, path: &Path) -> Result<Self> {
        let mut rd = OffsetReader {
            inner: r,
            offset: 0,
            path,
        };
        let mut magic = [0u8; 8];
        rd.read_exact(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(rd.error(0, "bad magic, not a weight file"));
        }
        let spec_hash = u64::from_le_bytes(rd.array("spec hash")?);
        let count = u32::from_le_bytes(rd.array("tensor count")?) as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(rd.array("name length")?) as usize;
            let at = rd.offset;
            let mut name = vec![0u8; name_len];
            rd.read_exact(&mut name, "tensor name")?;
            let name =
                String::from_utf8(name).map_err(|_| rd.error(at, "tensor name is not UTF-8"))?;
            let at = rd.offset;
            let rank = u32::from_le_bytes(rd.array("rank")?) as usize;
            if rank == 0 || rank > 4 {
                return Err(rd.error(at, &format!("invalid rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(rd.array("extent")?) as usize);
            }
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; len * 4];
            rd.read_exact(&mut bytes, "tensor values")?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| rd.error(at, &e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(WeightFile { spec_hash, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode(BufReader::new(file), path)
    }
}

struct OffsetReader<'p, R> {
    inner: R,
    offset: u64,
    path: &'p Path,
}

impl<R: Read> OffsetReader<'_, R> {
    fn error(&self, offset: u64, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(
                        self.error(self.offset + filled as u64, &format!("truncated {what}"))
                    );
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io(self.path, e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.read_exact(&mut b, what)?;
        Ok(b)
    }
}
