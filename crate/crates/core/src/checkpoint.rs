//! `MAECT1` binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"MAECT1"
//! u16      format version
//! u32      config block length, then that many bytes of UTF-8 `key = value` lines
//! u32      tensor count
//! per tensor:
//!   u16    name length, then UTF-8 name
//!   u8     rank
//!   u32    each dim
//!   f32    payload, row-major
//! ```
//!
//! Payloads are 32-bit, so a checkpoint taken from a 64-bit model rounds its
//! values once; every later load/save cycle is exact.

use std::path::Path;

use crate::config::{parse_kv, KvMap};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::swin::{ModelConfig, SwinDenoiser};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"MAECT1";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

/// Model configuration as `key = value` lines, in a fixed key order.
pub fn config_block(cfg: &ModelConfig) -> String {
    let depths: Vec<String> = cfg.depths.iter().map(|d| d.to_string()).collect();
    format!(
        "image_size = {}x{}\nwindow_size = {}\ndepths = {}\nembed_dim = {}\nnum_heads = {}\nmlp_ratio = {}\nrel_pos_bias = {}\nshortcut_global = {}\nshortcut_trunk = {}\n",
        cfg.image_size.0,
        cfg.image_size.1,
        cfg.window_size,
        depths.join(","),
        cfg.embed_dim,
        cfg.num_heads,
        cfg.mlp_ratio,
        cfg.rel_pos_bias,
        cfg.shortcuts.global,
        cfg.shortcuts.trunk,
    )
}

/// Parse a config block written by [`config_block`].
pub fn parse_config_block(text: &str) -> Result<ModelConfig> {
    let mut kv = parse_kv(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let cfg = model_config_from_kv(&mut kv, ModelConfig::default())
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    if let Some(k) = kv.remaining().first() {
        return Err(Error::Checkpoint(format!("config block has unknown key `{k}`")));
    }
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(cfg)
}

/// Pull every model key out of `kv`, starting from `base`.
pub(crate) fn model_config_from_kv(kv: &mut KvMap, base: ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base;
    if let Some(v) = kv.take("image_size") {
        cfg.image_size = parse_size(&v)?;
    }
    if let Some(v) = kv.take_parsed("window_size")? {
        cfg.window_size = v;
    }
    if let Some(v) = kv.take("depths") {
        cfg.depths = v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad depths entry `{s}`")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(v) = kv.take_parsed("embed_dim")? {
        cfg.embed_dim = v;
    }
    if let Some(v) = kv.take_parsed("num_heads")? {
        cfg.num_heads = v;
    }
    if let Some(v) = kv.take_parsed("mlp_ratio")? {
        cfg.mlp_ratio = v;
    }
    if let Some(v) = kv.take_parsed("rel_pos_bias")? {
        cfg.rel_pos_bias = v;
    }
    if let Some(v) = kv.take_parsed("shortcut_global")? {
        cfg.shortcuts.global = v;
    }
    if let Some(v) = kv.take_parsed("shortcut_trunk")? {
        cfg.shortcuts.trunk = v;
    }
    Ok(cfg)
}

/// `"64x64"`, `"64,64"` or a single `"64"`.
pub(crate) fn parse_size(v: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = v.split(['x', ',']).map(str::trim).collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("bad image size `{v}`")));
    match parts.as_slice() {
        [s] => {
            let n = num(s)?;
            Ok((n, n))
        }
        [h, w] => Ok((num(h)?, num(w)?)),
        _ => Err(Error::Config(format!("bad image size `{v}`"))),
    }
}

impl Checkpoint {
    pub fn from_model(model: &SwinDenoiser) -> Self {
        Checkpoint {
            config: model.config().clone(),
            tensors: model
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            let data = t.data.iter().map(|&v| v as f64).collect();
            store.insert(t.name.clone(), Tensor::new(&t.shape, data)?)?;
        }
        Ok(store)
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<SwinDenoiser> {
        SwinDenoiser::from_params(self.config.clone(), self.to_params()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let block = config_block(&self.config);
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        out.extend_from_slice(block.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name `{}` too long", t.name)))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Checkpoint(format!("tensor `{}` rank too large", t.name)))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` payload does not match its shape", t.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("tensor `{}` dim too large", t.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::Checkpoint("not a MAECT1 checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let block_len = u32::from_le_bytes(r.array()?) as usize;
        let block = std::str::from_utf8(r.take(block_len)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let config = parse_config_block(block)?;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
