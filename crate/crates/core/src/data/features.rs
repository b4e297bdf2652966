//! Binary region-feature files.
//!
//! Layout (little-endian): magic `VFEA`, `u32` version = 1, `u32` image
//! count, then per image a `u16` id length, the UTF-8 id, `u32` μ,
//! `u32` d_v and μ·d_v `f32` values row-major.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VFEA";
pub const VERSION: u32 = 1;

/// Region features keyed by image id.
pub type FeatureMap = BTreeMap<String, Tensor>;

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Corrupt {
                        offset: start + filled as u64,
                        msg: format!("unexpected end of file while reading {what}"),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_features<R: Read>(reader: R) -> Result<FeatureMap> {
    let mut r = CountingReader {
        inner: reader,
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Corrupt {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("image count")?;
    let mut out = FeatureMap::new();
    for _ in 0..count {
        let id_len = r.u16("id length")? as usize;
        let mut id = vec![0u8; id_len];
        let id_at = r.offset;
        r.exact(&mut id, "image id")?;
        let id = String::from_utf8(id).map_err(|_| Error::Corrupt {
            offset: id_at,
            msg: "image id is not UTF-8".into(),
        })?;
        let header_at = r.offset;
        let mu = r.u32("region count")? as usize;
        let dv = r.u32("feature width")? as usize;
        if mu == 0 || dv == 0 {
            return Err(Error::Corrupt {
                offset: header_at,
                msg: format!("empty feature block for `{id}` ({mu}x{dv})"),
            });
        }
        let mut raw = vec![0u8; mu * dv * 4];
        r.exact(&mut raw, "feature block")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.insert(id, Tensor::new([mu, dv], data)?);
    }
    Ok(out)
}

pub fn write_features<W: Write>(w: &mut W, features: &FeatureMap) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(features.len() as u32).to_le_bytes())?;
    for (id, t) in features {
        if t.rank() != 2 {
            return Err(Error::dim("write_features", t.shape(), &[0, 0]));
        }
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Contract(format!("image id too long: {} bytes", id.len())))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_features(BufReader::new(f))
}

pub fn save_features(path: impl AsRef<Path>, features: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    write_features(&mut w, features)?;
    w.flush()?;
    Ok(())
}
