//! Dataset manifests (one JSON record per line) and their raster stores.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::pgm::{decode_pnm, encode_pnm};
use crate::dataset::{Dataset, DatasetIndex, SampleRecord, Split};
use crate::error::{ConfigError, FormatError, Result};

pub fn encode_manifest(index: &DatasetIndex) -> Result<String> {
    let mut out = String::new();
    for it in index.items() {
        out.push_str(&serde_json::to_string(it).map_err(FormatError::from)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a manifest. Without `num_categories`, the count is one past the largest id.
pub fn decode_manifest(text: &str, split: Split, num_categories: Option<usize>) -> Result<DatasetIndex> {
    let mut items = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line)
            .map_err(|e| FormatError::Corrupt(format!("manifest line {}: {e}", line_no + 1)))?;
        items.push(rec);
    }
    if items.is_empty() {
        return Err(ConfigError::invalid("manifest", "no records").into());
    }
    let n = num_categories.unwrap_or_else(|| items.iter().map(|i| i.category_id).max().unwrap_or(0) + 1);
    Ok(DatasetIndex::new(items, n, split)?)
}

/// Writes every raster under `root` at its manifest path, then the manifest itself.
pub fn save_dataset(root: &Path, manifest_name: &str, ds: &Dataset) -> Result<()> {
    let jobs: Vec<(&str, &crate::autodiff::Tensor)> = ds
        .index
        .items()
        .iter()
        .zip(ds.photos.iter().zip(&ds.sketches))
        .flat_map(|(it, (photo, sketches))| {
            std::iter::once((it.photo_path.as_str(), photo))
                .chain(it.sketch_paths.iter().map(String::as_str).zip(sketches.iter()))
        })
        .collect();
    jobs.par_iter().try_for_each(|(rel, t)| -> Result<()> {
        let path = root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(FormatError::from)?;
        }
        fs::write(path, encode_pnm(t)?).map_err(FormatError::from)?;
        Ok(())
    })?;
    fs::write(root.join(manifest_name), encode_manifest(&ds.index)?).map_err(FormatError::from)?;
    Ok(())
}

/// Reads a manifest and its rasters; raster paths are relative to the manifest's directory.
pub fn load_dataset(manifest: &Path, split: Split, num_categories: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(FormatError::from)?;
    let index = decode_manifest(&text, split, num_categories)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let read = |rel: &str| -> Result<crate::autodiff::Tensor> {
        let bytes = fs::read(root.join(rel))
            .map_err(|e| FormatError::Corrupt(format!("{rel}: {e}")))?;
        Ok(decode_pnm(&bytes).map_err(|e| FormatError::Corrupt(format!("{rel}: {e}")))?)
    };
    let loaded: Vec<(crate::autodiff::Tensor, Vec<crate::autodiff::Tensor>)> = index
        .items()
        .par_iter()
        .map(|it| Ok((read(&it.photo_path)?, it.sketch_paths.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?)))
        .collect::<Result<_>>()?;
    let (photos, sketches) = loaded.into_iter().unzip();
    Ok(Dataset::new(index, photos, sketches)?)
}
