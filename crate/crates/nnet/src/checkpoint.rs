//! Trained-model snapshots: a JSON header plus a little-endian `f32` blob
//! holding weights (canonical layer order), mean patches and, optionally,
//! the momentum buffers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::network::Network;
use crate::spec::NetworkSpec;
use crate::tensor::Real;
use crate::{NnetError, Result};

pub const FORMAT: &str = "tumorcast-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub weights: Vec<f32>,
    /// Training-set mean patch for each input stream.
    pub means: Vec<Vec<f32>>,
    /// 1-based epoch that produced the weights (0 = untrained).
    pub epoch: usize,
    pub seed: u64,
    pub velocity: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: NetworkSpec,
    epoch: usize,
    seed: u64,
    params: Vec<ParamEntry>,
    mean_lens: Vec<usize>,
    has_velocity: bool,
    blob: String,
    blob_bytes: usize,
}

/// `model.ckpt.json` -> `model.ckpt.raw`.
pub fn blob_path(header: &Path) -> PathBuf {
    let stem = header
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".json").unwrap_or(n).to_string())
        .unwrap_or_else(|| "model.ckpt".into());
    header.with_file_name(format!("{stem}.raw"))
}

impl Checkpoint {
    pub fn from_network<T: Real>(net: &Network<T>, means: Vec<Vec<f32>>, epoch: usize, seed: u64) -> Self {
        Self {
            spec: net.spec().clone(),
            weights: net.export_f32(),
            means,
            epoch,
            seed,
            velocity: None,
        }
    }

    pub fn network<T: Real>(&self) -> Result<Network<T>> {
        Network::from_params(&self.spec, &self.weights)
    }

    fn param_entries(&self) -> Result<Vec<ParamEntry>> {
        let net = Network::<f32>::from_params(&self.spec, &self.weights)?;
        Ok(net
            .labelled_param_lens()
            .into_iter()
            .map(|(name, len)| ParamEntry { name, len })
            .collect())
    }

    pub fn save(&self, header_path: &Path) -> Result<()> {
        let params = self.param_entries()?;
        let mean_lens: Vec<usize> = self.means.iter().map(Vec::len).collect();
        let mut blob = Vec::with_capacity(
            4 * (self.weights.len() + mean_lens.iter().sum::<usize>() + self.velocity.as_ref().map_or(0, Vec::len)),
        );
        let mut put = |vals: &[f32]| {
            for v in vals {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&self.weights);
        for m in &self.means {
            put(m);
        }
        if let Some(v) = &self.velocity {
            put(v);
        }
        let raw = blob_path(header_path);
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            spec: self.spec.clone(),
            epoch: self.epoch,
            seed: self.seed,
            params,
            mean_lens,
            has_velocity: self.velocity.is_some(),
            blob: raw
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string(),
            blob_bytes: blob.len(),
        };
        fs::write(&raw, &blob)?;
        fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let header: Header = serde_json::from_str(&fs::read_to_string(header_path)?)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(NnetError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let raw = header_path.with_file_name(&header.blob);
        let bytes = fs::read(&raw)?;
        let n_weights: usize = header.params.iter().map(|p| p.len).sum();
        let n_means: usize = header.mean_lens.iter().sum();
        let n_vel = if header.has_velocity { n_weights } else { 0 };
        let expected = 4 * (n_weights + n_means + n_vel);
        if bytes.len() != expected || header.blob_bytes != expected {
            return Err(NnetError::Checkpoint(format!(
                "blob {} has {} bytes, expected {expected}",
                raw.display(),
                bytes.len()
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let weights = floats[..n_weights].to_vec();
        let mut off = n_weights;
        let means = header
            .mean_lens
            .iter()
            .map(|&n| {
                let m = floats[off..off + n].to_vec();
                off += n;
                m
            })
            .collect();
        let velocity = header.has_velocity.then(|| floats[off..].to_vec());
        let ckpt = Self {
            spec: header.spec,
            weights,
            means,
            epoch: header.epoch,
            seed: header.seed,
            velocity,
        };
        let actual = ckpt.param_entries()?;
        let declared: Vec<(String, usize)> = header.params.into_iter().map(|p| (p.name, p.len)).collect();
        let actual: Vec<(String, usize)> = actual.into_iter().map(|p| (p.name, p.len)).collect();
        if actual != declared {
            return Err(NnetError::Checkpoint(
                "parameter table does not match the network spec".into(),
            ));
        }
        Ok(ckpt)
    }
}
