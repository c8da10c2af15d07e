//! Checkpoint container: model config, metadata, named parameter arrays, and
//! batch-norm running statistics.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SSTTA001"
//! u32      header length, then that many bytes of UTF-8 "key=value" lines
//!          (config fields plus free-form "meta.*" entries)
//! u32      parameter count
//!          per parameter: u16 name len, name, u8 ndim, u64 dims…, f64 data
//! u32      statistic count
//!          per statistic: u16 name len, name, u64 len, f64 data
//! [u8;32]  SHA-256 over every preceding byte
//! ```
//!
//! f64 values round-trip bit-exactly. Save → load of the same model restores
//! every parameter and running statistic to identical bits.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SSTTA001";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, String>,
    pub params: BTreeMap<String, Tensor>,
    pub stats: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            config: model.config.clone(),
            meta,
            params: model
                .params()
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
            stats: model.stats().clone(),
        }
    }

    /// Instantiate a model carrying exactly this checkpoint's values.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::init(&self.config, 0)?;
        model.reset(self)?;
        Ok(model)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid metadata {key}")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or invalid metadata {key}")))
    }

    fn header_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        out.push_str(&format!("image_size={}\n", c.image_size));
        out.push_str(&format!("in_channels={}\n", c.in_channels));
        out.push_str(&format!("patch_size={}\n", c.patch_size));
        out.push_str(&format!("embed_dim={}\n", c.embed_dim));
        out.push_str(&format!("num_blocks={}\n", c.num_blocks));
        out.push_str(&format!("state_dim={}\n", c.state_dim));
        out.push_str(&format!("num_classes={}\n", c.num_classes));
        out.push_str(&format!("linear_bias={}\n", c.linear_bias));
        for (k, v) in &self.meta {
            out.push_str(&format!("meta.{k}={v}\n"));
        }
        out
    }

    fn parse_header(text: &str) -> Result<(ModelConfig, BTreeMap<String, String>)> {
        let mut config = ModelConfig::default();
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad value for {key}: {v:?}")))
            };
            match key {
                "image_size" => config.image_size = parse_usize(value)?,
                "in_channels" => config.in_channels = parse_usize(value)?,
                "patch_size" => config.patch_size = parse_usize(value)?,
                "embed_dim" => config.embed_dim = parse_usize(value)?,
                "num_blocks" => config.num_blocks = parse_usize(value)?,
                "state_dim" => config.state_dim = parse_usize(value)?,
                "num_classes" => config.num_classes = parse_usize(value)?,
                "linear_bias" => {
                    config.linear_bias = value.parse::<bool>().map_err(|_| {
                        Error::Checkpoint(format!("bad value for linear_bias: {value:?}"))
                    })?
                }
                _ => {
                    if let Some(mk) = key.strip_prefix("meta.") {
                        meta.insert(mk.to_string(), value.to_string());
                    } else {
                        return Err(Error::Checkpoint(format!("unknown header key {key:?}")));
                    }
                }
            }
        }
        Ok((config, meta))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let header = self.header_text().into_bytes();
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);

        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            write_name(&mut buf, name)?;
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        buf.extend_from_slice(&(self.stats.len() as u32).to_le_bytes());
        for (name, values) in &self.stats {
            write_name(&mut buf, name)?;
            buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for &v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);

        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest[..] != *stored_digest {
            return Err(Error::Checkpoint("checksum mismatch, file corrupt".into()));
        }

        let mut r = Cursor { buf: body, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic or unsupported version: {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let (config, meta) = Self::parse_header(header)?;

        let n_params = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let name = r.name()?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let data = r.f64s(count)?;
            params.insert(name, Tensor::new(shape, data)?);
        }

        let n_stats = r.u32()? as usize;
        let mut stats = BTreeMap::new();
        for _ in 0..n_stats {
            let name = r.name()?;
            let count = r.u64()? as usize;
            stats.insert(name, r.f64s(count)?);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }

        Ok(Checkpoint {
            config,
            meta,
            params,
            stats,
        })
    }
}

impl Model {
    /// Restore every parameter and running statistic from the checkpoint.
    /// The checkpoint must describe this exact architecture.
    pub fn reset(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        if checkpoint.config != self.config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {:?} differs from model config {:?}",
                checkpoint.config, self.config
            )));
        }
        let model_names: Vec<&String> = self.params().keys().collect();
        let ckpt_names: Vec<&String> = checkpoint.params.keys().collect();
        if model_names != ckpt_names {
            return Err(Error::Checkpoint(
                "parameter names do not match the architecture".into(),
            ));
        }
        for (name, value) in &checkpoint.params {
            self.set_param(name, value.detach())?;
        }
        for (name, values) in &checkpoint.stats {
            self.set_stat(name, values.clone())?;
        }
        Ok(())
    }
}

fn write_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Checkpoint(format!("name too long: {name}")));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
