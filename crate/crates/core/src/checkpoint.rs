//! Transform-network checkpoints.
//!
//! A checkpoint is one safetensors file. Tensors:
//!
//! - `convs.{i}.weight`, `convs.{i}.bias` for every conv of the trunk, in
//!   [`ArchConfig::conv_specs`] order;
//! - `styles.{k}.cin.{j}.scale`, `styles.{k}.cin.{j}.shift` per style `k` and
//!   normalisation site `j`;
//! - `styles.{k}.thumbnail` as a 3×H×W raster in `[0, 1]`.
//!
//! The metadata map carries `format_version`, `arch` (JSON), `styles` (JSON
//! list of manifest entries, index order = `k`), `provenance` (JSON) and
//! `payload_sha256`, a digest over every tensor's name, shape and bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::backbone::LayerId;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::raster::ImageTensor;
use crate::tensor::Tensor;
use crate::transform::{ArchConfig, CinParams, StyleBank, StyleEntry, TransformNet};

pub const FORMAT_VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hash of the resolved training config.
    pub config_hash: String,
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
    /// Backbone weight source, as reported by the loaded backbone.
    pub backbone: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    style_id: String,
    display_name: String,
    #[serde(default)]
    recommended_layers: Vec<LayerId>,
}

/// A loaded checkpoint: the network plus its provenance record.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: TransformNet<f32>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(net: TransformNet<f32>, provenance: Provenance) -> Self {
        Self { net, provenance }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_archive(&self.net, &self.provenance)?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        from_archive(Archive::from_bytes(bytes, origin).map_err(|e| corrupt(origin, e.to_string()))?, origin)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        to_archive(&self.net, &self.provenance)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Write `net` to `path`; returns the path for chaining.
pub fn export_checkpoint(net: &TransformNet<f32>, provenance: &Provenance, path: &Path) -> Result<std::path::PathBuf> {
    to_archive(net, provenance)?.save(path)?;
    Ok(path.to_path_buf())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Hex sha256 of the file contents; used as the served model identity.
pub fn file_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::CorruptCheckpoint { path: path.to_path_buf(), message: message.into() }
}

fn payload_digest(archive: &Archive) -> String {
    let mut h = Sha256::new();
    for (name, t) in &archive.tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn to_archive(net: &TransformNet<f32>, provenance: &Provenance) -> Result<Archive> {
    let mut a = Archive::default();
    for (i, c) in net.convs().iter().enumerate() {
        let s = c.spec;
        a.insert(format!("convs.{i}.weight"), vec![s.out_channels, s.in_channels, s.kernel, s.kernel], c.weight.clone());
        a.insert(format!("convs.{i}.bias"), vec![s.out_channels], c.bias.clone());
    }
    let mut manifest = Vec::new();
    for (k, s) in net.style_bank.styles.iter().enumerate() {
        for (j, p) in s.cin_params.iter().enumerate() {
            a.insert(format!("styles.{k}.cin.{j}.scale"), vec![p.scale.len()], p.scale.clone());
            a.insert(format!("styles.{k}.cin.{j}.shift"), vec![p.shift.len()], p.shift.clone());
        }
        let (h, w) = s.thumbnail.dims();
        a.insert(format!("styles.{k}.thumbnail"), vec![3, h, w], s.thumbnail.data().to_vec());
        manifest.push(ManifestEntry {
            style_id: s.style_id.clone(),
            display_name: s.display_name.clone(),
            recommended_layers: s.recommended_layers.clone(),
        });
    }
    a.metadata.insert("format_version".into(), FORMAT_VERSION.to_string());
    a.metadata.insert("arch".into(), serde_json::to_string(&net.arch)?);
    a.metadata.insert("styles".into(), serde_json::to_string(&manifest)?);
    a.metadata.insert("provenance".into(), serde_json::to_string(provenance)?);
    a.metadata.insert("payload_sha256".into(), payload_digest(&a));
    Ok(a)
}

fn from_archive(a: Archive, path: &Path) -> Result<Checkpoint> {
    let meta = |key: &str| a.metadata.get(key).ok_or_else(|| corrupt(path, format!("missing metadata `{key}`")));
    let version: u32 = meta("format_version")?.parse().map_err(|_| corrupt(path, "unparseable format_version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let digest = payload_digest(&a);
    if *meta("payload_sha256")? != digest {
        return Err(corrupt(path, "payload checksum mismatch"));
    }
    let arch: ArchConfig = serde_json::from_str(meta("arch")?).map_err(|e| corrupt(path, format!("arch: {e}")))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(meta("styles")?).map_err(|e| corrupt(path, format!("styles: {e}")))?;
    let provenance: Provenance =
        serde_json::from_str(meta("provenance")?).map_err(|e| corrupt(path, format!("provenance: {e}")))?;
    arch.validate()?;

    let mut convs = Vec::new();
    for (i, s) in arch.conv_specs().into_iter().enumerate() {
        let w = a.expect(&format!("convs.{i}.weight"), &[s.out_channels, s.in_channels, s.kernel, s.kernel])?;
        let b = a.expect(&format!("convs.{i}.bias"), &[s.out_channels])?;
        convs.push(Conv2d::new(s, w.data.clone(), b.data.clone()));
    }
    let sites = arch.cin_channels();
    let mut styles = Vec::new();
    for (k, m) in manifest.into_iter().enumerate() {
        let mut cin_params = Vec::new();
        for (j, &c) in sites.iter().enumerate() {
            let scale = a.expect(&format!("styles.{k}.cin.{j}.scale"), &[c])?.data.clone();
            let shift = a.expect(&format!("styles.{k}.cin.{j}.shift"), &[c])?.data.clone();
            cin_params.push(CinParams { scale, shift });
        }
        let thumb = a.get(&format!("styles.{k}.thumbnail"))?;
        let [3, h, w] = thumb.shape[..] else {
            return Err(corrupt(path, format!("thumbnail of style {k} has shape {:?}", thumb.shape)));
        };
        styles.push(StyleEntry {
            style_id: m.style_id,
            display_name: m.display_name,
            cin_params,
            thumbnail: ImageTensor::new(Tensor::from_vec(3, h, w, thumb.data.clone())),
            recommended_layers: m.recommended_layers,
        });
    }
    let mut bank = StyleBank::default();
    for s in styles {
        if bank.index_of(&s.style_id).is_ok() {
            return Err(Error::DuplicateStyle(s.style_id));
        }
        bank.styles.push(s);
    }
    let net = TransformNet::from_parts(arch, convs, bank)?;
    Ok(Checkpoint { net, provenance })
}
