//! Versioned checkpoint format.
//!
//! Layout: a fixed magic and format version, a JSON header describing the
//! model configuration, training state and the parameter table, the raw
//! little-endian f64 payload, and a trailing SHA-256 over everything
//! before it. Loads are all-or-nothing: a bad digest or a mismatched
//! parameter shape never yields a partially restored model.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use sketchfill_core::model::{InpaintModel, ModelConfig};
use sketchfill_core::nn::ParamGroup;
use sketchfill_core::tensor::Tensor;

use crate::config::TrainConfig;

const MAGIC: &[u8; 4] = b"SKFL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("version error: {field}: {detail}")]
    Version { field: String, detail: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Model(#[from] sketchfill_core::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// ChaCha word position, split to stay within JSON number range.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &sketchfill_core::Rng64) -> Self {
        let pos = rng.word_pos();
        RngState {
            seed: rng.seed_words(),
            stream: rng.stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> sketchfill_core::Rng64 {
        let pos = ((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128;
        sketchfill_core::Rng64::restore(self.seed, self.stream, pos)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamDesc {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    dtype: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train_config: Option<TrainConfig>,
    step: u64,
    rng: Option<RngState>,
    vae_val_error: Option<f64>,
    params: Vec<ParamDesc>,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub rng: Option<RngState>,
    pub vae_val_error: Option<f64>,
    params: Vec<(ParamDesc, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &InpaintModel,
        train_config: Option<&TrainConfig>,
        step: u64,
        rng: Option<RngState>,
        vae_val_error: Option<f64>,
    ) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, e)| {
                (
                    ParamDesc {
                        name: e.name.clone(),
                        shape: e.value.shape().to_vec(),
                        group: e.group,
                        dtype: "f64".to_string(),
                        len: e.value.len(),
                    },
                    e.value.data().to_vec(),
                )
            })
            .collect();
        Checkpoint {
            model: model.cfg.clone(),
            train_config: train_config.cloned(),
            step,
            rng,
            vae_val_error,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            vae_val_error: self.vae_val_error,
            params: self.params.iter().map(|(d, _)| d.clone()).collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| CheckpointError::Integrity(format!("header serialization: {e}")))?;

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for (_, data) in &self.params {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);

        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))?;
        f.write_all(&digest).map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .map_err(io_err(path))?
            .read_to_end(&mut raw)
            .map_err(io_err(path))?;
        if raw.len() < 48 {
            return Err(CheckpointError::Integrity("file too short".into()));
        }
        let (body, digest) = raw.split_at(raw.len() - 32);
        let expect = Sha256::digest(body);
        if digest != expect.as_slice() {
            return Err(CheckpointError::Integrity(
                "checksum mismatch (truncated or corrupted file)".into(),
            ));
        }
        if &body[0..4] != MAGIC {
            return Err(CheckpointError::Version {
                field: "magic".into(),
                detail: "not a checkpoint file".into(),
            });
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                field: "format_version".into(),
                detail: format!("file has {version}, this build reads {FORMAT_VERSION}"),
            });
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        if body.len() < 16 + hlen {
            return Err(CheckpointError::Integrity("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[16..16 + hlen])
            .map_err(|e| CheckpointError::Integrity(format!("header parse: {e}")))?;

        let mut offset = 16 + hlen;
        let mut params = Vec::with_capacity(header.params.len());
        for desc in header.params {
            if desc.dtype != "f64" {
                return Err(CheckpointError::Version {
                    field: format!("{}.dtype", desc.name),
                    detail: format!("unsupported dtype `{}`", desc.dtype),
                });
            }
            let bytes = desc.len * 8;
            if body.len() < offset + bytes {
                return Err(CheckpointError::Integrity(format!(
                    "payload truncated at `{}`",
                    desc.name
                )));
            }
            let data: Vec<f64> = body[offset..offset + bytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += bytes;
            params.push((desc, data));
        }
        if offset != body.len() {
            return Err(CheckpointError::Integrity("trailing bytes in payload".into()));
        }
        Ok(Checkpoint {
            model: header.model,
            train_config: header.train_config,
            step: header.step,
            rng: header.rng,
            vae_val_error: header.vae_val_error,
            params,
        })
    }

    /// Field-by-field comparison against an expected model configuration;
    /// the first mismatch is named in the error.
    pub fn check_model_config(&self, expected: &ModelConfig) -> Result<()> {
        let a = &self.model.unet;
        let b = &expected.unet;
        let fields: [(&str, bool); 9] = [
            ("latent_channels", a.latent_channels == b.latent_channels),
            ("base_width", a.base_width == b.base_width),
            ("channel_multipliers", a.channel_multipliers == b.channel_multipliers),
            ("attention_scales", a.attention_scales == b.attention_scales),
            ("text_embed_dim", a.text_embed_dim == b.text_embed_dim),
            ("groupnorm_groups", a.groupnorm_groups == b.groupnorm_groups),
            ("max_tokens", a.max_tokens == b.max_tokens),
            ("latent_size", a.latent_size == b.latent_size),
            ("vae_mode", self.model.vae_mode == expected.vae_mode),
        ];
        for (name, ok) in fields {
            if !ok {
                return Err(CheckpointError::Version {
                    field: name.to_string(),
                    detail: "checkpoint was produced by a different model configuration".into(),
                });
            }
        }
        Ok(())
    }

    /// Rebuilds the full model from the stored configuration and weights.
    pub fn into_model(self) -> Result<InpaintModel> {
        let mut model = InpaintModel::new(&self.model, None)?;
        if self.params.len() != model.store.len() {
            return Err(CheckpointError::Version {
                field: "params".into(),
                detail: format!(
                    "checkpoint has {} parameters, model expects {}",
                    self.params.len(),
                    model.store.len()
                ),
            });
        }
        for (desc, data) in self.params {
            let id = model.store.lookup(&desc.name).ok_or_else(|| {
                CheckpointError::Version {
                    field: desc.name.clone(),
                    detail: "parameter not present in this model".into(),
                }
            })?;
            if model.store.value(id).shape() != desc.shape.as_slice() {
                return Err(CheckpointError::Version {
                    field: desc.name.clone(),
                    detail: format!(
                        "shape {:?} vs expected {:?}",
                        desc.shape,
                        model.store.value(id).shape()
                    ),
                });
            }
            model.store.set(id, Tensor::new(&desc.shape, data));
        }
        Ok(model)
    }
}

pub fn save_model(
    model: &InpaintModel,
    path: &Path,
    train_config: Option<&TrainConfig>,
    step: u64,
    rng: Option<RngState>,
    vae_val_error: Option<f64>,
) -> Result<()> {
    Checkpoint::from_model(model, train_config, step, rng, vae_val_error).save(path)
}

pub fn load_model(path: &Path) -> Result<InpaintModel> {
    Checkpoint::load(path)?.into_model()
}
