//! Persistent file formats.
//!
//! * embeddings: `FGEM`, u32 version, u32 count, u32 dim, `count` u64 ids, then
//!   `count × dim` f64 values, all little-endian;
//! * checkpoints: `FGCK` container of named sections;
//! * dataset manifests: one JSON record per line, rasters as 8-bit PGM/PPM;
//! * reports and histories: pretty-printed JSON with fixed key order.

mod binary;
mod checkpoint;
mod manifest;
mod pgm;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use binary::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, Container, CONTAINER_MAGIC, CONTAINER_VERSION,
    EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint};
pub use manifest::{decode_manifest, encode_manifest, load_dataset, save_dataset};
pub use pgm::{decode_pnm, encode_pnm};

use crate::error::{FormatError, Result};
use crate::pipeline::EmbeddingSet;
use crate::training::Checkpoint;

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(FormatError::from)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(FormatError::from)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(FormatError::from)?;
    Ok(serde_json::from_str(&text).map_err(FormatError::from)?)
}

pub fn save_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    fs::write(path, encode_embeddings(set)?).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    Ok(decode_embeddings(&fs::read(path).map_err(FormatError::from)?)?)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(FormatError::from)?)
}
