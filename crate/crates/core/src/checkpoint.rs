//! Binary parameter checkpoints with an embedded model configuration.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::{init_params, layout, ViTConfig, ViTParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"APLACKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ViTParams, cfg: &ViTConfig) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let cfg_json = serde_json::to_vec(cfg)?;
    let named = params.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &dim in t.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn checkpoint_save(params: &ViTParams, cfg: &ViTConfig, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, cfg)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("file truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and validates every tensor against the embedded
/// configuration.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ViTConfig, ViTParams)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic; not a checkpoint"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let len = c.u32("config length")? as usize;
    let at = c.pos;
    let cfg: ViTConfig = serde_json::from_slice(c.take(len, "config")?)
        .map_err(|e| Error::format(at as u64, format!("config block: {e}")))?;
    cfg.validate()
        .map_err(|e| Error::format(at as u64, format!("config block: {e}")))?;
    let expect = layout(&cfg);
    let count_at = c.pos;
    let count = c.u32("tensor count")? as usize;
    if count != expect.len() {
        return Err(Error::format(
            count_at as u64,
            format!("{count} tensors stored, configuration implies {}", expect.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expect {
        let at = c.pos;
        let n = u16::from_le_bytes(c.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?;
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        if name != want_name || &shape != want_shape {
            return Err(Error::format(
                at as u64,
                format!("tensor {name} {shape:?} does not match expected {want_name} {want_shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        let data = c
            .take(8 * numel, "tensor data")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last tensor"));
    }
    let mut params = init_params(&cfg, &mut Rng::new(0))?;
    for ((_, slot), t) in params.named_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok((cfg, params))
}

pub fn checkpoint_load(path: &Path) -> Result<(ViTConfig, ViTParams)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks it against the configuration a caller is
/// about to use; a mismatch names the first differing tensor.
pub fn checkpoint_load_for(path: &Path, cfg: &ViTConfig) -> Result<ViTParams> {
    let (_, params) = checkpoint_load(path)?;
    params.check_shapes(cfg)?;
    Ok(params)
}
