//! Parameter checkpoints.
//!
//! A checkpoint is two files side by side:
//!
//! * `<name>.ckpt`, a flat archive: the magic `FSAHCKPT`, a `u32` format
//!   version, a `u64` tensor count, then per tensor a `u64` name length, the
//!   UTF-8 dotted name, a `u64` rank, `rank` `u64` dims and the values as
//!   little-endian `f64`. Tensors appear in name order. All integers are
//!   little-endian.
//! * `<name>.json`, the manifest: network configuration and its digest,
//!   the archive digest, and the normalization the network was trained with.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamMap;
use crate::dataset::{json_digest, ChannelStats};
use crate::error::{Error, Result};
use crate::net::{FsaHeatNet, NetConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSAHCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// How raw samples are mapped to network inputs and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub stats: ChannelStats,
    /// Targets are `θ / theta_max`.
    pub theta_max: f64,
    pub rows: usize,
    pub cols: usize,
    /// Digest of the training data the statistics came from.
    pub dataset_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub net: NetConfig,
    pub config_digest: String,
    pub archive_digest: String,
    pub param_count: usize,
    pub tensors: usize,
    pub epoch: usize,
    pub val_rmse: Option<f64>,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamMap,
}

/// Manifest path belonging to an archive path.
pub fn manifest_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

pub fn config_digest(net: &NetConfig) -> String {
    json_digest(net)
}

fn encode_archive(params: &ParamMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims().len() as u64).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("archive is truncated".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A length or dimension, bounded by the bytes left so corrupt input
    /// cannot request huge allocations.
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > self.bytes.len() as u64 * 8 + 8 {
            return Err(Error::Checkpoint(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }
}

fn decode_archive(bytes: &[u8]) -> Result<ParamMap> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("archive version {version} is not supported")));
    }
    let count = r.len()?;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.len()?;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(dims, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

impl Checkpoint {
    /// Packages `params` for `net`, refusing parameters that do not fit it.
    pub fn new(
        net: &FsaHeatNet,
        params: ParamMap,
        epoch: usize,
        val_rmse: Option<f64>,
        normalization: Normalization,
    ) -> Result<Self> {
        net.check_params(&params)?;
        let archive = encode_archive(&params);
        Ok(Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                net: net.config.clone(),
                config_digest: config_digest(&net.config),
                archive_digest: hex::encode(Sha256::digest(&archive)),
                param_count: net.param_count(),
                tensors: params.len(),
                epoch,
                val_rmse,
                normalization,
            },
            params,
        })
    }

    /// Writes the archive to `path` and the manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, encode_archive(&self.params))?;
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(manifest_path(path), json + "\n")?;
        Ok(())
    }

    /// Loads and verifies a checkpoint. When `expected` is given, a
    /// checkpoint trained under a different network configuration is
    /// refused.
    pub fn load(path: &Path, expected: Option<&NetConfig>) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_slice(&fs::read(manifest_path(path))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "manifest version {} is not supported",
                manifest.format_version
            )));
        }
        if config_digest(&manifest.net) != manifest.config_digest {
            return Err(Error::Checkpoint("manifest config digest does not match its config".into()));
        }
        if let Some(cfg) = expected {
            let want = config_digest(cfg);
            if want != manifest.config_digest {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {} vs requested {want}",
                    manifest.config_digest
                )));
            }
        }
        let bytes = fs::read(path)?;
        if hex::encode(Sha256::digest(&bytes)) != manifest.archive_digest {
            return Err(Error::Checkpoint("archive digest mismatch".into()));
        }
        let params = decode_archive(&bytes)?;
        FsaHeatNet::new(manifest.net.clone())?.check_params(&params)?;
        Ok(Checkpoint { manifest, params })
    }

    pub fn network(&self) -> Result<FsaHeatNet> {
        FsaHeatNet::new(self.manifest.net.clone())
    }
}
