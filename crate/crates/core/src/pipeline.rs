//! Embedding a dataset with a trained checkpoint and scoring sketch→photo retrieval.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dataset::{Dataset, DatasetIndex};
use crate::encoders::Encoder;
use crate::error::{Error, Result, RetrievalError};
use crate::retrieval::{build_report, EmbeddingIndex, Query, RetrievalReport};
use crate::training::Checkpoint;

/// Ids and row-major embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<u64>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<u64>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Mismatch(format!("{} values for {} rows of dimension {dim}", data.len(), ids.len())));
        }
        Ok(Self { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

const SKETCH_BITS: u32 = 16;

/// Sketch `k` of instance `instance`.
pub fn sketch_id(instance: u64, k: usize) -> u64 {
    (instance << SKETCH_BITS) | k as u64
}

/// Instance that a sketch id belongs to.
pub fn sketch_instance(id: u64) -> u64 {
    id >> SKETCH_BITS
}

fn embed_all(enc: &Encoder, images: Vec<(u64, &crate::autodiff::Tensor)>) -> Result<EmbeddingSet> {
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|(_, im)| enc.encode(im).map(|o| o.embedding))
        .collect::<Result<_, _>>()?;
    let dim = enc.config.embedding_dim();
    EmbeddingSet::new(images.iter().map(|(id, _)| *id).collect(), dim, rows.concat())
}

pub fn embed_photos(enc: &Encoder, ds: &Dataset) -> Result<EmbeddingSet> {
    let items = ds.index.items();
    embed_all(enc, items.iter().zip(&ds.photos).map(|(it, p)| (it.instance_id, p)).collect())
}

pub fn embed_sketches(enc: &Encoder, ds: &Dataset) -> Result<EmbeddingSet> {
    if ds.index.items().iter().any(|it| it.sketch_paths.len() > 1 << SKETCH_BITS) {
        return Err(Error::Mismatch("too many sketches per instance for 16-bit sketch ids".into()));
    }
    let mut images = Vec::new();
    for (it, sketches) in ds.index.items().iter().zip(&ds.sketches) {
        for (k, s) in sketches.iter().enumerate() {
            images.push((sketch_id(it.instance_id, k), s));
        }
    }
    embed_all(enc, images)
}

/// Scores sketch queries against photos of the instances listed in `index`.
///
/// Flip confusion is reported only when the records carry mirror annotations.
pub fn evaluate_embeddings(
    photos: &EmbeddingSet,
    sketches: &EmbeddingSet,
    index: &DatasetIndex,
    ks: &[usize],
    provenance: BTreeMap<String, String>,
) -> Result<RetrievalReport> {
    if photos.dim != sketches.dim {
        return Err(RetrievalError::DimMismatch {
            query: sketches.dim,
            index: photos.dim,
        }
        .into());
    }
    let category: BTreeMap<u64, usize> = index.items().iter().map(|it| (it.instance_id, it.category_id)).collect();
    let photo_categories = photos
        .ids
        .iter()
        .map(|id| {
            category
                .get(id)
                .copied()
                .ok_or_else(|| Error::Mismatch(format!("photo {id} is not in the dataset")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gallery = EmbeddingIndex::new(photos.ids.clone(), photos.dim, photos.data.clone(), photo_categories)?;
    if index.has_mirror_annotations() {
        gallery = gallery.with_mirror_map(index.mirror_map())?;
    }
    let queries = (0..sketches.len())
        .map(|i| {
            let id = sketches.ids[i];
            let gt = sketch_instance(id);
            let category = *category
                .get(&gt)
                .ok_or_else(|| Error::Mismatch(format!("sketch {id} belongs to unknown instance {gt}")))?;
            Ok(Query {
                id,
                embedding: sketches.row(i).to_vec(),
                ground_truth: gt,
                category,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(build_report(&gallery, &queries, ks, provenance)?)
}

/// Embeds `ds` with both encoders and scores retrieval.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, ks: &[usize]) -> Result<RetrievalReport> {
    ckpt.check_dataset(ds)?;
    let photos = embed_photos(&ckpt.photo, ds)?;
    let sketches = embed_sketches(&ckpt.sketch, ds)?;
    let provenance = BTreeMap::from([
        ("epochs".to_string(), ckpt.epoch.to_string()),
        ("split".to_string(), ds.index.split().to_string()),
        ("embedding_dim".to_string(), ckpt.embedding_dim().to_string()),
    ]);
    evaluate_embeddings(&photos, &sketches, &ds.index, ks, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sketch_ids_round_trip() {
        assert_eq!(sketch_instance(sketch_id(1234, 7)), 1234);
        assert_ne!(sketch_id(1, 0), sketch_id(0, 1));
    }
}
