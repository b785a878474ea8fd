//! OVDF checkpoints.
//!
//! Layout (little-endian): `"OVDF"`, version `u16 = 1`, config block length
//! `u32` followed by UTF-8 `key=value` lines, then parameter records until
//! the trailer: name length `u16` + bytes, rank `u8`, extents `u32 × rank`,
//! f32 data. The last four bytes are the crc32 of everything before them.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::model::{ModelConfig, ModelError, OmniDiT};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"OVDF";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config mismatch: {key} is {found} in file, {requested} requested")]
    ConfigMismatch {
        key: String,
        found: String,
        requested: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Ordered `key=value` config entries plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub records: ParamStore<f32>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
                return Err(CheckpointError::Malformed(format!("config entry {k:?}={v:?}")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for p in self.records.iter() {
            let name = p.name.as_bytes();
            let shape = p.value.shape();
            if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
                return Err(CheckpointError::Malformed(format!("record {}", p.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(shape.len() as u8);
            for &e in shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(CheckpointError::Truncated {
                offset: 0,
                needed: 4,
            });
        }
        let magic: [u8; 4] = buf[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        if buf.len() < 14 {
            return Err(CheckpointError::Truncated {
                offset: 4,
                needed: 14 - 4,
            });
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let text_len = r.u32()?;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("config block: {e}")))?;
        let config = text
            .lines()
            .map(|line| {
                line.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| CheckpointError::Malformed(format!("config line {line:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut records = ParamStore::new();
        while r.pos < body.len() {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed(format!("record name: {e}")))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n <= body.len())
                .ok_or_else(|| CheckpointError::Malformed(format!("record {name} extents {shape:?}")))?;
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let value = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("record {name}: {e}")))?;
            records
                .insert(name.clone(), value)
                .map_err(|_| CheckpointError::Malformed(format!("duplicate record {name}")))?;
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&buf)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Architecture keys written into every model checkpoint.
pub fn model_entries(cfg: &ModelConfig) -> Vec<(String, String)> {
    let [f, h, w] = cfg.grid;
    [
        ("model_dim", cfg.model_dim.to_string()),
        ("depth", cfg.depth.to_string()),
        ("heads", cfg.heads.to_string()),
        ("latent_channels", cfg.latent_channels.to_string()),
        ("latent_grid", format!("{f}x{h}x{w}")),
        ("caption_len", cfg.caption_len.to_string()),
        ("vocab_size", cfg.vocab_size.to_string()),
        ("use_modality_embedding", cfg.use_modality_embedding.to_string()),
        ("use_msph", cfg.use_msph.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn model_config_from(ck: &Checkpoint) -> Result<ModelConfig> {
    fn field<V: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<V> {
        let raw = ck
            .get(key)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing config key {key}")))?;
        raw.parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad value {key}={raw}")))
    }
    let grid_text: String = field(ck, "latent_grid")?;
    let grid: Vec<usize> = grid_text
        .split('x')
        .map(|s| s.parse().ok())
        .collect::<Option<_>>()
        .filter(|g: &Vec<usize>| g.len() == 3)
        .ok_or_else(|| CheckpointError::Malformed(format!("bad latent_grid {grid_text}")))?;
    Ok(ModelConfig {
        model_dim: field(ck, "model_dim")?,
        depth: field(ck, "depth")?,
        heads: field(ck, "heads")?,
        latent_channels: field(ck, "latent_channels")?,
        grid: [grid[0], grid[1], grid[2]],
        caption_len: field(ck, "caption_len")?,
        vocab_size: field(ck, "vocab_size")?,
        use_modality_embedding: field(ck, "use_modality_embedding")?,
        use_msph: field(ck, "use_msph")?,
    })
}

/// Prefix of auxiliary (non-model) records such as optimizer moments.
pub const AUX_PREFIX: &str = "optim.";

/// Model parameters and architecture keys, then `extra` config entries and
/// auxiliary records.
pub fn model_checkpoint(
    model: &OmniDiT<f32>,
    extra: &[(String, String)],
    aux: &ParamStore<f32>,
) -> Result<Checkpoint> {
    let mut config = model_entries(model.config());
    for (k, v) in extra {
        if config.iter().any(|(ck, _)| ck == k) {
            return Err(CheckpointError::Malformed(format!("duplicate config key {k}")));
        }
        config.push((k.clone(), v.clone()));
    }
    let mut records = model.params().clone();
    for p in records.iter_mut() {
        p.grad = None;
    }
    for p in aux.iter() {
        if !p.name.starts_with(AUX_PREFIX) {
            return Err(CheckpointError::Malformed(format!(
                "auxiliary record {} lacks the {AUX_PREFIX} prefix",
                p.name
            )));
        }
        records
            .insert(p.name.clone(), p.value.clone())
            .map_err(|_| CheckpointError::Malformed(format!("duplicate record {}", p.name)))?;
    }
    Ok(Checkpoint { config, records })
}

/// Rebuilds the model, checking every architecture key against `requested`
/// when given. Returns the model and the auxiliary records.
pub fn restore_model(
    ck: &Checkpoint,
    requested: Option<&ModelConfig>,
) -> Result<(OmniDiT<f32>, ParamStore<f32>)> {
    let cfg = model_config_from(ck)?;
    if let Some(req) = requested {
        for ((key, found), (_, want)) in model_entries(&cfg).into_iter().zip(model_entries(req)) {
            if found != want {
                return Err(CheckpointError::ConfigMismatch {
                    key,
                    found,
                    requested: want,
                });
            }
        }
    }
    let mut params = ParamStore::new();
    let mut aux = ParamStore::new();
    for p in ck.records.iter() {
        let dest = if p.name.starts_with(AUX_PREFIX) {
            &mut aux
        } else {
            &mut params
        };
        dest.insert(p.name.clone(), p.value.clone())
            .map_err(|_| CheckpointError::Malformed(format!("duplicate record {}", p.name)))?;
    }
    Ok((OmniDiT::from_params(cfg, params)?, aux))
}
