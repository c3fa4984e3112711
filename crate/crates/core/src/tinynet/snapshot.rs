//! Binary model snapshots.
//!
//! All integers little-endian:
//!
//! ```text
//! magic        8 bytes   b"CMADNET\0"
//! version      u32       1
//! config_len   u32       byte length of the config JSON
//! config       [u8]      NetConfig as UTF-8 JSON
//! seed         u64
//! count        u32       number of tensors
//! count times:
//!   name_len   u32
//!   name       [u8]      UTF-8, e.g. "conv1.w"
//!   rank       u32
//!   dims       rank x u64
//!   values     prod(dims) x f64 (IEEE-754 binary64)
//! ```

use std::fs;
use std::path::Path;

use super::net::{NetConfig, NetworkParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CMADNET\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &NetworkParams) -> Vec<u8> {
    let config = serde_json::to_vec(&params.config).expect("config serialises");
    let mut out = Vec::with_capacity(64 + config.len() + params.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&params.seed.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in PARAM_NAMES.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_inner(buf: &[u8]) -> Result<NetworkParams, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported snapshot version {version}"));
    }
    let clen = r.u32()? as usize;
    let config: NetConfig =
        serde_json::from_slice(r.take(clen)?).map_err(|e| format!("config: {e}"))?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|e| e.to_string())?;
        if PARAM_NAMES.get(i) != Some(&name) {
            return Err(format!("tensor {i} is named {name:?}"));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(&dims, data).map_err(|e| e.to_string())?);
    }
    if r.pos != buf.len() {
        return Err("trailing bytes".into());
    }
    let params = NetworkParams {
        config,
        seed,
        tensors,
    };
    params.check_shapes().map_err(|e| e.to_string())?;
    Ok(params)
}

pub fn decode(buf: &[u8], origin: &Path) -> Result<NetworkParams> {
    decode_inner(buf).map_err(|reason| Error::Format {
        path: origin.to_path_buf(),
        reason,
    })
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let p = NetworkParams::init(NetConfig::default(), 42).unwrap();
        let bytes = encode(&p);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn corruption_is_reported() {
        let p = NetworkParams::init(NetConfig::default(), 1).unwrap();
        let bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, Path::new("x")).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, Path::new("x")).is_err());
    }
}
