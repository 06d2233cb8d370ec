//! Self-describing binary checkpoints.
//!
//! Layout: magic `SMILCKPT`, u32 version, u32 header length, JSON header,
//! raw little-endian parameters then BN buffers, and a trailing SHA-256 over
//! everything before it. The header carries a digest of the configs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::resnet::{NetworkConfig, ResNet3d};
use super::scalar::Scalar;
use super::train::TrainConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SMILCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: Vec<T>,
    pub buffers: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    network: NetworkConfig,
    train: TrainConfig,
    epoch: usize,
    val_loss: f64,
    params: usize,
    buffers: usize,
    config_digest: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the JSON encodings of the two configs.
pub fn config_digest(network: &NetworkConfig, train: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(network).expect("serialisable"));
    h.update(b"\n");
    h.update(serde_json::to_vec(train).expect("serialisable"));
    hex(&h.finalize())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(net: &ResNet3d<T>, train: &TrainConfig, epoch: usize, val_loss: f64) -> Self {
        Checkpoint {
            network: net.config().clone(),
            train: train.clone(),
            epoch,
            val_loss,
            params: net.params().to_vec(),
            buffers: net.buffers().to_vec(),
        }
    }

    pub fn config_digest(&self) -> String {
        config_digest(&self.network, &self.train)
    }

    /// Rebuilds the network with the stored weights and BN statistics.
    pub fn to_network(&self) -> Result<ResNet3d<T>> {
        let mut net = ResNet3d::new(self.network.clone(), 0)?;
        if net.params().len() != self.params.len() || net.buffers().len() != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "tensor sizes {}/{} do not match the network config ({}/{})",
                self.params.len(),
                self.buffers.len(),
                net.params().len(),
                net.buffers().len()
            )));
        }
        net.params_mut().copy_from_slice(&self.params);
        net.buffers_mut().copy_from_slice(&self.buffers);
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            network: self.network.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            val_loss: self.val_loss,
            params: self.params.len(),
            buffers: self.buffers.len(),
            config_digest: self.config_digest(),
        };
        let json = serde_json::to_vec(&header).expect("serialisable");
        let mut out = Vec::with_capacity(48 + json.len() + (self.params.len() + self.buffers.len()) * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &v in self.params.iter().chain(&self.buffers) {
            v.write_le(&mut out);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("content digest mismatch (file corrupted or truncated)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let hdr_bytes = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(hdr_bytes).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        if header.config_digest != config_digest(&header.network, &header.train) {
            return Err(bad("config digest mismatch"));
        }
        let data = &body[16 + hlen..];
        if data.len() != (header.params + header.buffers) * T::BYTES {
            return Err(bad("tensor payload has the wrong length"));
        }
        let mut vals = data.chunks_exact(T::BYTES).map(T::read_le);
        let params: Vec<T> = vals.by_ref().take(header.params).collect();
        let buffers: Vec<T> = vals.collect();
        Ok(Checkpoint {
            network: header.network,
            train: header.train,
            epoch: header.epoch,
            val_loss: header.val_loss,
            params,
            buffers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}
