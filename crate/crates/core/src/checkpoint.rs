//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u32 LE version, u64 LE manifest length, a JSON
//! manifest, then every tensor as raw f64 LE blobs. Each manifest entry
//! carries name, shape, partition tag, byte offset and the blob's SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, LatentStatistics};
use crate::tensor::{ParamStore, ParamTag, Tensor};

pub const MAGIC: &[u8; 8] = b"DAPFSRCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Decoder,
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: ParamTag,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub n_samples: usize,
    pub seed: u64,
    pub mu: Entry,
    pub sigma: Entry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub version: u32,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Encoder checkpoints only: checksum of the decoder they were trained against.
    pub decoder_hash: Option<String>,
    /// Encoder checkpoints only.
    pub latent_shape: Option<(usize, usize)>,
    pub params: Vec<Entry>,
    pub stats: Option<StatsEntry>,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(config: &serde_json::Value) -> String {
    sha(config.to_string().as_bytes())
}

struct Writer {
    blobs: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: &str, t: &Tensor, tag: ParamTag) -> Entry {
        let bytes = t.to_le_bytes();
        let e = Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            tag,
            offset: self.blobs.len() as u64,
            sha256: sha(&bytes),
        };
        self.blobs.extend_from_slice(&bytes);
        e
    }
}

fn encode(mut manifest: Manifest, params: &ParamStore, stats: Option<&LatentStatistics>) -> Vec<u8> {
    let mut w = Writer { blobs: Vec::new() };
    manifest.params = params.iter().map(|p| w.push(&p.name, &p.value, p.tag)).collect();
    manifest.stats = stats.map(|s| StatsEntry {
        n_samples: s.n_samples,
        seed: s.seed,
        mu: w.push("stats.mu", s.mu.tensor(), ParamTag::Frozen),
        sigma: w.push("stats.sigma", s.sigma.tensor(), ParamTag::Frozen),
    });
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(20 + json.len() + w.blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&manifest.version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.blobs);
    out
}

/// Parses the header and manifest, returning the manifest and blob area.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Load("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Load(format!("checkpoint version {version}, this build reads {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if len > body.len() {
        return Err(Error::Load("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Load(format!("bad manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::Load(format!("manifest version {} disagrees with header", manifest.version)));
    }
    Ok((manifest, &body[len..]))
}

fn read_entry(e: &Entry, blobs: &[u8]) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start + n * 8;
    if end > blobs.len() {
        return Err(Error::Load(format!("blob for {} runs past end of file", e.name)));
    }
    let bytes = &blobs[start..end];
    if sha(bytes) != e.sha256 {
        return Err(Error::Checksum(e.name.clone()));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(&e.shape, data))
}

fn read_params(m: &Manifest, blobs: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in &m.params {
        if store.index_of(&e.name).is_some() {
            return Err(Error::Load(format!("duplicate parameter {}", e.name)));
        }
        store.add(e.name.clone(), read_entry(e, blobs)?, e.tag);
    }
    Ok(store)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decoder_bytes(dec: &Decoder, stats: &LatentStatistics) -> Vec<u8> {
    let config = serde_json::to_value(&dec.config).expect("config serialises");
    let manifest = Manifest {
        kind: CheckpointKind::Decoder,
        version: VERSION,
        config_hash: config_hash(&config),
        config,
        decoder_hash: None,
        latent_shape: None,
        params: Vec::new(),
        stats: None,
    };
    encode(manifest, &dec.params, Some(stats))
}

pub fn decoder_from_bytes(bytes: &[u8]) -> Result<(Decoder, LatentStatistics)> {
    let (m, blobs) = read_manifest(bytes)?;
    if m.kind != CheckpointKind::Decoder {
        return Err(Error::Load("expected a decoder checkpoint".into()));
    }
    let config: DecoderConfig =
        serde_json::from_value(m.config.clone()).map_err(|e| Error::Load(format!("decoder config: {e}")))?;
    let dec = Decoder::from_params(config, read_params(&m, blobs)?)?;
    let s = m.stats.as_ref().ok_or_else(|| Error::Load("decoder checkpoint lacks latent statistics".into()))?;
    let code = |e: &Entry| -> Result<LatentCode> {
        let t = read_entry(e, blobs)?;
        if t.shape() != [dec.l(), dec.d_w()] {
            return Err(Error::Load(format!("{} has shape {:?}", e.name, t.shape())));
        }
        LatentCode::from_tensor(t)
    };
    let stats = LatentStatistics {
        mu: code(&s.mu)?,
        sigma: code(&s.sigma)?,
        n_samples: s.n_samples,
        seed: s.seed,
    };
    Ok((dec, stats))
}

pub fn encoder_bytes(enc: &Encoder, decoder_hash: &str) -> Vec<u8> {
    let config = serde_json::to_value(&enc.config).expect("config serialises");
    let manifest = Manifest {
        kind: CheckpointKind::Encoder,
        version: VERSION,
        config_hash: config_hash(&config),
        config,
        decoder_hash: Some(decoder_hash.to_string()),
        latent_shape: Some((enc.l, enc.d_w)),
        params: Vec::new(),
        stats: None,
    };
    encode(manifest, &enc.params, None)
}

/// Returns the encoder and the decoder hash it was trained against.
pub fn encoder_from_bytes(bytes: &[u8]) -> Result<(Encoder, String)> {
    let (m, blobs) = read_manifest(bytes)?;
    if m.kind != CheckpointKind::Encoder {
        return Err(Error::Load("expected an encoder checkpoint".into()));
    }
    let config: EncoderConfig =
        serde_json::from_value(m.config.clone()).map_err(|e| Error::Load(format!("encoder config: {e}")))?;
    let (l, d_w) = m.latent_shape.ok_or_else(|| Error::Load("encoder checkpoint lacks latent shape".into()))?;
    let hash = m.decoder_hash.clone().ok_or_else(|| Error::Load("encoder checkpoint lacks decoder hash".into()))?;
    Ok((Encoder::from_params(config, l, d_w, read_params(&m, blobs)?)?, hash))
}

pub fn save_decoder(path: &Path, dec: &Decoder, stats: &LatentStatistics) -> Result<()> {
    write(path, &decoder_bytes(dec, stats))
}

pub fn load_decoder(path: &Path) -> Result<(Decoder, LatentStatistics)> {
    decoder_from_bytes(&read(path)?)
}

pub fn save_encoder(path: &Path, enc: &Encoder, decoder_hash: &str) -> Result<()> {
    write(path, &encoder_bytes(enc, decoder_hash))
}

/// Loads an encoder and checks it was trained against `decoder`.
pub fn load_encoder(path: &Path, decoder: &Decoder) -> Result<Encoder> {
    let (enc, hash) = encoder_from_bytes(&read(path)?)?;
    let actual = decoder.checksum();
    if hash != actual {
        return Err(Error::Pairing(format!(
            "encoder was trained against decoder {hash}, got {actual}"
        )));
    }
    Ok(enc)
}

/// SHA-256 of a file's bytes, used to reference artifacts downstream.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha(&read(path)?))
}
