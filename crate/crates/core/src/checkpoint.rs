//! Checkpoint files: a short text header followed by named little-endian f64
//! tensors.
//!
//! ```text
//! mmemo-checkpoint 1
//! config_hash <sha256 hex>
//! config <json>
//! params <count>
//! <name> <json shape>
//! <8·numel bytes>
//! ...
//! ```

use std::io::{BufRead, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &str = "mmemo-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(bad("unexpected end of file"));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

fn field<'a>(s: &'a str, key: &str) -> Result<&'a str> {
    s.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected `{key}` line, found `{s}`")))
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Self { config, params }
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let mut out = format!(
            "{MAGIC}\nconfig_hash {}\nconfig {config}\nparams {}\n",
            self.config_hash(),
            self.params.len()
        )
        .into_bytes();
        for (name, t) in self.params.iter() {
            let shape = serde_json::to_string(t.shape()).expect("shape serializes");
            out.extend_from_slice(format!("{name} {shape}\n").as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        if line(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hash = line(&mut r)?;
        let hash = field(&hash, "config_hash")?.to_string();
        let config = line(&mut r)?;
        let config: ModelConfig =
            serde_json::from_str(field(&config, "config")?).map_err(|e| bad(format!("config: {e}")))?;
        if config.hash() != hash {
            return Err(bad("config hash does not match embedded config"));
        }
        let count = line(&mut r)?;
        let count: usize = field(&count, "params")?
            .parse()
            .map_err(|e| bad(format!("param count: {e}")))?;
        let mut params = ParamStore::default();
        for _ in 0..count {
            let header = line(&mut r)?;
            let (name, shape) = header
                .split_once(' ')
                .ok_or_else(|| bad(format!("bad tensor header `{header}`")))?;
            let shape: Vec<usize> = serde_json::from_str(shape).map_err(|e| bad(format!("shape of {name}: {e}")))?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|_| bad(format!("truncated data for {name}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rejects a checkpoint whose model config differs from `expected`.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        if self.config_hash() != expected.hash() {
            return Err(Error::Config(format!(
                "checkpoint config {} does not match run config {}",
                self.config_hash(),
                expected.hash()
            )));
        }
        Ok(())
    }
}
