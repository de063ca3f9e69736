//! Model container file.
//!
//! Layout:
//!
//! ```text
//! WPFS-MODEL\n
//! <header: one line of JSON>\n
//! [embedding block: D·M little-endian f64, row-major]   (WPFS variants only)
//! [one block per parameter slot, in declaration order: rows·cols LE f64]
//! ```
//!
//! The header records the format name and version, the architecture, every
//! block's shape, and a SHA-256 digest of the configuration fields.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Architecture, Method, Model};
use crate::embeddings::{EmbeddingMatrix, EmbeddingMethod};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const MAGIC: &str = "WPFS-MODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    pub architecture: Architecture,
    pub features: usize,
    pub classes: usize,
    pub embedding_method: Option<EmbeddingMethod>,
    /// `[D, M]` when an embedding block is present.
    pub embedding_shape: Option<[usize; 2]>,
}

impl ModelConfig {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub config_digest: String,
    pub feature_names: Vec<String>,
    pub slots: Vec<SlotHeader>,
}

pub fn method_of(model: &Model) -> Method {
    match model {
        Model::Mlp(_) => Method::Mlp,
        Model::Wpfs(m) => match (m.net.use_wpn, m.net.use_spn) {
            (true, true) => Method::Wpfs,
            (true, false) => Method::WpfsNoSpn,
            (false, true) => Method::WpfsNoWpn,
            (false, false) => Method::WpfsNoWpnNoSpn,
        },
    }
}

fn config_of(model: &Model) -> ModelConfig {
    match model {
        Model::Mlp(m) => {
            let cfg = m.net.config();
            ModelConfig {
                method: Method::Mlp,
                architecture: Architecture {
                    classifier_hidden: cfg.hidden.iter().map(|h| h.width).collect(),
                    aux_hidden: Vec::new(),
                    dropout: cfg.hidden.first().map_or(0.0, |h| h.dropout),
                    batch_norm: cfg.uses_batch_norm(),
                },
                features: cfg.input,
                classes: cfg.output,
                embedding_method: None,
                embedding_shape: None,
            }
        }
        Model::Wpfs(m) => ModelConfig {
            method: method_of(model),
            architecture: m.net.architecture.clone(),
            features: m.net.features,
            classes: m.net.classes,
            embedding_method: Some(m.net.embedding.method),
            embedding_shape: Some([m.net.embedding.features(), m.net.embedding.size()]),
        },
    }
}

fn write_block<W: Write>(out: &mut W, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn read_block<R: Read>(input: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let mut bytes = vec![0u8; rows * cols * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated parameter block: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_model<W: Write>(mut out: W, model: &Model, feature_names: &[String]) -> Result<()> {
    let config = config_of(model);
    let store = model.params();
    let header = ModelHeader {
        format: MAGIC.to_string(),
        version: FORMAT_VERSION,
        config_digest: config.digest(),
        config,
        feature_names: feature_names.to_vec(),
        slots: store
            .ids()
            .map(|id| SlotHeader {
                name: store.name(id).to_string(),
                rows: store.value(id).rows(),
                cols: store.value(id).cols(),
                trainable: store.is_trainable(id),
            })
            .collect(),
    };
    writeln!(out, "{MAGIC}")?;
    serde_json::to_writer(&mut out, &header)?;
    writeln!(out)?;
    if let Model::Wpfs(m) = model {
        write_block(&mut out, &m.net.embedding.matrix)?;
    }
    for id in store.ids() {
        write_block(&mut out, store.value(id))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(input: R) -> Result<(Model, ModelHeader)> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format(format!("missing {MAGIC} magic line")));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: ModelHeader = serde_json::from_str(line.trim_end())?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    if header.config.digest() != header.config_digest {
        return Err(Error::Format("config digest does not match header".into()));
    }
    let cfg = &header.config;
    let embedding = match (cfg.embedding_method, cfg.embedding_shape) {
        (Some(method), Some([d, m])) => Some(EmbeddingMatrix {
            method,
            matrix: read_block(&mut reader, d, m)?,
        }),
        _ => None,
    };
    let mut model = Model::build(
        cfg.method,
        cfg.architecture.clone(),
        cfg.features,
        cfg.classes,
        embedding,
        &mut Rng::new(0),
    )?;
    let store = model.params_mut();
    if store.len() != header.slots.len() {
        return Err(Error::Format(format!(
            "header lists {} slots, architecture has {}",
            header.slots.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, slot) in ids.into_iter().zip(&header.slots) {
        let (rows, cols) = store.value(id).shape();
        if store.name(id) != slot.name || (rows, cols) != (slot.rows, slot.cols) {
            return Err(Error::Format(format!(
                "slot {} ({}x{}) does not match {} ({rows}x{cols})",
                slot.name,
                slot.rows,
                slot.cols,
                store.name(id)
            )));
        }
        let value = read_block(&mut reader, rows, cols)?;
        store.set_value(id, value)?;
    }
    Ok((model, header))
}

pub fn save_model(path: &Path, model: &Model, feature_names: &[String]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_model(std::io::BufWriter::new(file), model, feature_names)
}

pub fn load_model(path: &Path) -> Result<(Model, ModelHeader)> {
    read_model(std::fs::File::open(path)?)
}
