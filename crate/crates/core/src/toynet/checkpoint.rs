//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "PDMLCKP1"
//! channels_in  u32 LE
//! n_hidden     u32 LE
//! hidden[i]    u32 LE  (n_hidden entries)
//! embed_dim    u32 LE
//! num_classes  u32 LE
//! seed         u64 LE
//! n_params     u64 LE
//! params       f64 LE  (n_params entries, flat layout order)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{ModelParams, NetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDMLCKP1";

pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = params.config();
    let mut buf = Vec::with_capacity(64 + 8 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let put_u32 = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    put_u32(&mut buf, cfg.channels_in);
    put_u32(&mut buf, cfg.hidden.len());
    for &h in &cfg.hidden {
        put_u32(&mut buf, h);
    }
    put_u32(&mut buf, cfg.embed_dim);
    put_u32(&mut buf, cfg.num_classes);
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.flatten() {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice length"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if &r.take::<8>()? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let channels_in = r.u32()?;
    let n_hidden = r.u32()?;
    if n_hidden > 1024 {
        return Err(Error::format(path, "implausible layer count"));
    }
    let hidden = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let embed_dim = r.u32()?;
    let num_classes = r.u32()?;
    let seed = r.u64()?;
    let n = r.u64()? as usize;
    if bytes.len() != r.pos + 8 * n {
        return Err(Error::format(path, "parameter block length mismatch"));
    }
    let values = (0..n)
        .map(|_| r.take::<8>().map(|b| T::lit(f64::from_le_bytes(b))))
        .collect::<Result<Vec<_>>>()?;
    let config = NetConfig {
        channels_in,
        hidden,
        embed_dim,
        num_classes,
        seed,
    };
    ModelParams::from_flat(config, values)
}
