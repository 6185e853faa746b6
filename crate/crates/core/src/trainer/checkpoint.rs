//! Binary checkpoint: magic, format version, JSON header, then every
//! parameter as little-endian f32 (attention network first).

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainRunConfig;
use crate::attention::{AttentionNet, SparsityConfig};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::scale::ScaleNet;

pub const MAGIC: &[u8; 8] = b"NSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainRunConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub sparsity: SparsityConfig,
    pub attention_params: usize,
    pub scale_params: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub attention: AttentionNet<f32>,
    pub scale: ScaleNet<f32>,
}

impl Checkpoint {
    pub fn new(config: &TrainRunConfig, epoch: usize, attention: AttentionNet<f32>, scale: ScaleNet<f32>) -> Self {
        Self {
            header: CheckpointHeader {
                config: config.clone(),
                config_hash: config.hash(),
                epoch,
                sparsity: config.sparsity(),
                attention_params: attention.num_params(),
                scale_params: scale.num_params(),
            },
            attention,
            scale,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * (self.header.attention_params + self.header.scale_params));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for group in self.attention.params().into_iter().chain(self.scale.params()) {
            for v in group {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        let truncated = |_| Error::Input("checkpoint is truncated".into());
        cursor.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Input("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        cursor.read_exact(&mut word).map_err(truncated)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        cursor.read_exact(&mut word).map_err(truncated)?;
        let len = u32::from_le_bytes(word) as usize;
        if cursor.len() < len {
            return Err(Error::Input("checkpoint is truncated".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&cursor[..len])?;
        cursor = &cursor[len..];

        let config = &header.config;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut attention = AttentionNet::<f32>::new(config.attention_preset, &mut rng);
        attention.set_pad_mode(config.attention_padding);
        let mut scale = ScaleNet::<f32>::new(config.scale_preset, config.scale_set.count(), &mut rng);
        if attention.num_params() != header.attention_params || scale.num_params() != header.scale_params {
            return Err(Error::Input("checkpoint parameter counts do not match its presets".into()));
        }
        let expected = 4 * (header.attention_params + header.scale_params);
        if cursor.len() != expected {
            return Err(Error::Input(format!(
                "checkpoint holds {} parameter bytes, expected {expected}",
                cursor.len()
            )));
        }
        let mut values = cursor.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for group in attention.params_mut().into_iter().chain(scale.params_mut()) {
            for v in group.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(Self {
            header,
            attention,
            scale,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path).map_err(Error::io(path))?;
        file.write_all(&bytes).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionPreset;
    use crate::scale::ScalePreset;

    fn sample() -> Checkpoint {
        let config = TrainRunConfig {
            attention_preset: AttentionPreset::Desk,
            scale_preset: ScalePreset::Desk,
            ..TrainRunConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = AttentionNet::new(config.attention_preset, &mut rng);
        let s = ScaleNet::new(config.scale_preset, 3, &mut rng);
        Checkpoint::new(&config, 3, a, s)
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, c.header);
        assert_eq!(back.attention, c.attention);
        assert_eq!(back.scale.params(), c.scale.params());
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
    }
}
