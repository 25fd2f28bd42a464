//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ALIF" | u32 version | u32 n | n bytes of ModelConfig JSON
//! u32 count | count × blob                       (parameters)
//! u64 step  | u32 count | count × blob           (first moments)
//!             u32 count | count × blob           (second moments)
//! blob = u32 name_len | name (utf-8) | u32 rank | rank × u32 dims | f64 data
//! ```

use std::fs;
use std::path::Path;

use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::model::{AlifuseParams, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ALIF";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_blobs<'a>(out: &mut Vec<u8>, blobs: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
    put_u32(out, blobs.len() as u32);
    for (name, t) in blobs {
        put_blob(out, name, t);
    }
}

pub fn encode_checkpoint(params: &AlifuseParams, optim: &OptimState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let config = serde_json::to_vec(params.config())?;
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    let names = params.names();
    put_blobs(&mut out, names.iter().map(String::as_str).zip(params.tensors()));
    out.extend_from_slice(&optim.t.to_le_bytes());
    put_blobs(&mut out, names.iter().map(String::as_str).zip(&optim.m));
    put_blobs(&mut out, names.iter().map(String::as_str).zip(&optim.v));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32("blob name length")? as usize;
        let name = String::from_utf8(self.take(len, "blob name")?.to_vec())
            .map_err(|_| Error::Compatibility("blob name is not utf-8".into()))?;
        let rank = self.u32("blob rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u32("blob dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Truncated("blob size overflows".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::new(dims, data)?))
    }

    fn blobs(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32("blob count")? as usize;
        (0..count).map(|_| self.blob()).collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(AlifuseParams, OptimState)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::MagicMismatch { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
    }
    let n = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?)?;
    let mut params = AlifuseParams::init(&config, 0)?;
    params.load_tensors(r.blobs()?)?;
    let t = r.u64("optimizer step")?;
    let mut moments = Vec::with_capacity(2);
    for _ in 0..2 {
        let named = r.blobs()?;
        let ok = named.len() == params.len()
            && named
                .iter()
                .zip(params.names())
                .zip(params.tensors())
                .all(|(((n, m), pn), p)| n == pn && m.shape() == p.shape());
        if !ok {
            return Err(Error::Compatibility("optimizer moments do not match the parameters".into()));
        }
        moments.push(named.into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    }
    if r.pos != bytes.len() {
        return Err(Error::Compatibility(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let v = moments.pop().expect("two sets");
    let m = moments.pop().expect("two sets");
    Ok((params, OptimState { t, m, v }))
}

pub fn save_checkpoint(path: &Path, params: &AlifuseParams, optim: &OptimState) -> Result<()> {
    fs::write(path, encode_checkpoint(params, optim)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(AlifuseParams, OptimState)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (AlifuseParams, OptimState) {
        let c = ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            patch_size: 2,
            volume_side: 2,
            vocab_size: 6,
            max_len: 3,
            fusion_hidden: 4,
            ..ModelConfig::desk()
        };
        let p = AlifuseParams::init(&c, 9).unwrap();
        let mut o = OptimState::new(&p);
        o.t = 17;
        o.m[2].data_mut()[1] = 0.25;
        o.v[5].data_mut()[0] = 1e-9;
        (p, o)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (p, o) = sample();
        let bytes = encode_checkpoint(&p, &o).unwrap();
        let (p2, o2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p2.tensors(), p.tensors());
        assert_eq!(p2.config(), p.config());
        assert_eq!(o2, o);
        assert_eq!(encode_checkpoint(&p2, &o2).unwrap(), bytes);
    }

    #[test]
    fn distinct_load_errors() {
        let (p, o) = sample();
        let bytes = encode_checkpoint(&p, &o).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::MagicMismatch { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::VersionMismatch { found: 2, .. })));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
    }
}
