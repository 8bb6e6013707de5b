//! Paired photo/sketch catalogue.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::ConfigError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One photo with its matching sketches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub instance_id: u64,
    pub category_id: usize,
    pub photo_path: String,
    pub sketch_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_sibling_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    items: Vec<SampleRecord>,
    num_categories: usize,
    split: Split,
    by_category: Vec<Vec<usize>>,
}

impl DatasetIndex {
    pub fn new(items: Vec<SampleRecord>, num_categories: usize, split: Split) -> Result<Self, ConfigError> {
        let mut seen = HashSet::new();
        let mut by_category = vec![Vec::new(); num_categories];
        for (pos, it) in items.iter().enumerate() {
            if !seen.insert(it.instance_id) {
                return Err(ConfigError::invalid(
                    "instance_id",
                    format!("duplicate id {}", it.instance_id),
                ));
            }
            if it.sketch_paths.is_empty() {
                return Err(ConfigError::invalid(
                    "sketch_paths",
                    format!("instance {} has no sketches", it.instance_id),
                ));
            }
            if it.category_id >= num_categories {
                return Err(ConfigError::invalid(
                    "category_id",
                    format!("{} outside 0..{num_categories}", it.category_id),
                ));
            }
            by_category[it.category_id].push(pos);
        }
        Ok(Self {
            items,
            num_categories,
            split,
            by_category,
        })
    }

    pub fn items(&self) -> &[SampleRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn category(&self, pos: usize) -> usize {
        self.items[pos].category_id
    }

    pub fn sketch_count(&self, pos: usize) -> usize {
        self.items[pos].sketch_paths.len()
    }

    /// Item positions grouped by category id.
    pub fn by_category(&self) -> &[Vec<usize>] {
        &self.by_category
    }

    /// Symmetric instance-id → sibling-id map over pairs where both members are present.
    pub fn mirror_map(&self) -> BTreeMap<u64, u64> {
        let present: HashSet<u64> = self.items.iter().map(|i| i.instance_id).collect();
        self.items
            .iter()
            .filter_map(|i| i.mirror_sibling_id.map(|s| (i.instance_id, s)))
            .filter(|(_, s)| present.contains(s))
            .collect()
    }

    /// Whether the records carry mirror-sibling annotations at all.
    pub fn has_mirror_annotations(&self) -> bool {
        self.items.iter().any(|i| i.mirror_sibling_id.is_some())
    }
}

/// A dataset index together with its rasters, aligned by item position.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub photos: Vec<Tensor>,
    pub sketches: Vec<Vec<Tensor>>,
}

impl Dataset {
    pub fn new(index: DatasetIndex, photos: Vec<Tensor>, sketches: Vec<Vec<Tensor>>) -> Result<Self, ConfigError> {
        if photos.len() != index.len() || sketches.len() != index.len() {
            return Err(ConfigError::invalid("rasters", "raster count does not match index"));
        }
        for (pos, s) in sketches.iter().enumerate() {
            if s.len() != index.sketch_count(pos) {
                return Err(ConfigError::invalid("rasters", "sketch count does not match index"));
            }
        }
        let shape = photos.first().map(|p| p.shape().to_vec());
        if let Some(shape) = shape {
            if photos.iter().chain(sketches.iter().flatten()).any(|t| t.shape() != shape) {
                return Err(ConfigError::invalid("rasters", "rasters differ in shape"));
            }
        }
        Ok(Self {
            index,
            photos,
            sketches,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// `[C, H, W]` of the rasters, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.photos.first().map(Tensor::shape)
    }

    pub fn photo(&self, pos: usize, flipped: bool) -> Tensor {
        maybe_flip(&self.photos[pos], flipped)
    }

    pub fn sketch(&self, pos: usize, sketch: usize, flipped: bool) -> Tensor {
        maybe_flip(&self.sketches[pos][sketch], flipped)
    }

    /// Restriction to the given item positions.
    pub fn subset(&self, positions: &[usize], split: Split) -> Result<Self, ConfigError> {
        let items = positions.iter().map(|&p| self.index.items[p].clone()).collect();
        let index = DatasetIndex::new(items, self.index.num_categories, split)?;
        Self::new(
            index,
            positions.iter().map(|&p| self.photos[p].clone()).collect(),
            positions.iter().map(|&p| self.sketches[p].clone()).collect(),
        )
    }
}

fn maybe_flip(t: &Tensor, flipped: bool) -> Tensor {
    if flipped {
        t.flip_horizontal()
    } else {
        t.clone()
    }
}
