//! Procedural photo/sketch pairs with orientation markers and exact mirror siblings.
//!
//! Each category is a polygon or star family. Every instance carries an
//! off-center circular notch so that its horizontal mirror is a visibly
//! different picture. Photos are filled, shaded renders with Gaussian noise;
//! sketches are stroked outlines of independently jittered geometry.
//! All pixel values are multiples of 1/255 so rasters survive an 8-bit round trip.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{Dataset, DatasetIndex, SampleRecord, Split};
use crate::error::ConfigError;
use crate::seeds;

/// Smallest side length that still resolves strokes and the notch marker.
pub const MIN_IMAGE_SIDE: usize = 16;
/// Half width of a sketch stroke, in pixels.
pub const STROKE_HALF_WIDTH: f64 = 0.6;
/// Jitter draws are clipped to this many standard deviations.
pub const JITTER_CLIP: f64 = 2.0;

const PHOTO_BACKGROUND: f64 = 0.15;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_categories: usize,
    pub instances_per_category: usize,
    pub sketches_per_instance: usize,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// Fraction of each category's instances that belong to a mirror pair.
    pub mirror_fraction: f64,
    /// Standard deviation of sketch vertex jitter, in pixels.
    pub stroke_jitter: f64,
    /// Standard deviation of photo pixel noise.
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_categories: 10,
            instances_per_category: 20,
            sketches_per_instance: 3,
            image_size: (32, 32),
            mirror_fraction: 0.5,
            stroke_jitter: 0.4,
            background_noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("num_categories", self.num_categories),
            ("instances_per_category", self.instances_per_category),
            ("sketches_per_instance", self.sketches_per_instance),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(field, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.mirror_fraction) {
            return Err(ConfigError::invalid("mirror_fraction", "must lie in [0, 1]"));
        }
        for (field, v) in [("stroke_jitter", self.stroke_jitter), ("background_noise", self.background_noise)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ConfigError::invalid(field, "must be finite and non-negative"));
            }
        }
        let (h, w) = self.image_size;
        if h.min(w) < MIN_IMAGE_SIDE {
            return Err(ConfigError::invalid(
                "image_size",
                format!("{h}x{w} is too small for the stroke width; need at least {MIN_IMAGE_SIDE} per side"),
            ));
        }
        Ok(())
    }

    /// Number of instances per category that are members of a mirror pair.
    pub fn paired_per_category(&self) -> usize {
        2 * ((self.instances_per_category as f64 * self.mirror_fraction) / 2.0).floor() as usize
    }

    pub fn instance_id(&self, category: usize, k: usize) -> u64 {
        (category * self.instances_per_category + k) as u64
    }
}

/// `(vertex count, inner radius ratio)`; a ratio below 1 makes a star.
pub fn family(category: usize) -> (usize, f64) {
    const TABLE: [(usize, f64); 10] = [
        (3, 1.0),
        (4, 1.0),
        (5, 1.0),
        (6, 1.0),
        (8, 1.0),
        (3, 0.5),
        (4, 0.5),
        (5, 0.5),
        (6, 0.5),
        (16, 1.0),
    ];
    match TABLE.get(category) {
        Some(&f) => f,
        None => (3 + category % 7, 0.45 + 0.1 * ((category / 7) % 5) as f64),
    }
}

/// Continuous description of one instance's shape in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGeometry {
    pub width: usize,
    pub height: usize,
    /// Outline vertices in drawing order, before mirroring.
    pub outline: Vec<(f64, f64)>,
    pub center: (f64, f64),
    pub radius: f64,
    pub notch_center: (f64, f64),
    pub notch_radius: f64,
    /// When set, the geometry is evaluated at `x → width − x`.
    pub mirrored: bool,
}

impl InstanceGeometry {
    fn sample(category: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let (n, inner) = family(category);
        let (wf, hf) = (width as f64, height as f64);
        let side = wf.min(hf);
        let radius = rng.random_range(0.2..0.28) * side;
        let cx = wf / 2.0 + rng.random_range(-0.12..0.12) * wf;
        let cy = hf / 2.0 + rng.random_range(-0.08..0.08) * hf;
        let (sx, sy) = (rng.random_range(0.85..1.15), rng.random_range(0.85..1.15));
        let points = if inner < 1.0 { 2 * n } else { n };
        let rot = rng.random_range(-0.25..0.25) * 2.0 * PI / points as f64;
        let outline = (0..points)
            .map(|k| {
                let r = if inner < 1.0 && k % 2 == 1 { radius * inner } else { radius };
                let a = rot - PI / 2.0 + k as f64 * 2.0 * PI / points as f64;
                (cx + r * sx * a.cos(), cy + r * sy * a.sin())
            })
            .collect();
        let mut phi = rng.random_range(-PI / 3.0..PI / 3.0);
        if rng.random_bool(0.5) {
            phi = PI - phi;
        }
        let d = 0.5 * radius * inner.max(0.6);
        Self {
            width,
            height,
            outline,
            center: (cx, cy),
            radius,
            notch_center: (cx + d * sx * phi.cos(), cy + d * sy * phi.sin()),
            notch_radius: 0.3 * radius * inner.max(0.6),
            mirrored: false,
        }
    }

    pub fn mirror(&self) -> Self {
        Self {
            mirrored: !self.mirrored,
            ..self.clone()
        }
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        if self.mirrored {
            (self.width as f64 - x, y)
        } else {
            (x, y)
        }
    }

    /// Whether a point lies in the filled shape minus the notch.
    pub fn inside(&self, x: f64, y: f64) -> bool {
        let (x, y) = self.to_local(x, y);
        let (nx, ny) = self.notch_center;
        let in_notch = (x - nx).powi(2) + (y - ny).powi(2) < self.notch_radius.powi(2);
        !in_notch && point_in_polygon(&self.outline, x, y)
    }

    /// Distance from a point to the outline or the notch circle.
    pub fn boundary_distance(&self, x: f64, y: f64) -> f64 {
        let (x, y) = self.to_local(x, y);
        let (nx, ny) = self.notch_center;
        let circle = (((x - nx).powi(2) + (y - ny).powi(2)).sqrt() - self.notch_radius).abs();
        polygon_edge_distance(&self.outline, x, y).min(circle)
    }

    /// Noise-free photo render, `[1, H, W]`.
    pub fn render_photo_clean(&self) -> Tensor {
        let (cy, r) = (self.center.1, self.radius);
        let data = self.rasterize(|g, px, py, i| {
            let cover = supersample(px, py, |x, y| g.inside(x, y));
            let shade = 0.7 + 0.2 * ((i as f64 + 0.5 - cy) / r).clamp(-1.0, 1.0);
            PHOTO_BACKGROUND + cover * (shade - PHOTO_BACKGROUND)
        });
        Tensor::new(vec![1, self.height, self.width], data).expect("positive dims")
    }

    /// Stroke render of this geometry, `[1, H, W]`.
    pub fn render_strokes(&self) -> Tensor {
        let data = self.rasterize(|g, px, py, _| {
            supersample(px, py, |x, y| g.boundary_distance(x, y) <= STROKE_HALF_WIDTH)
        });
        Tensor::new(vec![1, self.height, self.width], data).expect("positive dims")
    }

    fn rasterize(&self, f: impl Fn(&Self, f64, f64, usize) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for i in 0..self.height {
            for j in 0..self.width {
                out.push(f(self, j as f64, i as f64, i));
            }
        }
        out
    }

    /// Copy with every outline vertex and the notch perturbed by clipped Gaussian jitter.
    fn jittered(&self, sigma: f64, rng: &mut impl Rng) -> Self {
        let mut draw = |s: f64| -> f64 {
            if s == 0.0 {
                return 0.0;
            }
            let normal = Normal::new(0.0, s).expect("finite sigma");
            normal.sample(rng).clamp(-JITTER_CLIP * s, JITTER_CLIP * s)
        };
        let outline = self.outline.iter().map(|&(x, y)| (x + draw(sigma), y + draw(sigma))).collect();
        let notch_center = (self.notch_center.0 + draw(sigma / 2.0), self.notch_center.1 + draw(sigma / 2.0));
        let notch_radius = (self.notch_radius + draw(sigma / 2.0)).max(0.5);
        Self {
            outline,
            notch_center,
            notch_radius,
            ..self.clone()
        }
    }

    /// Largest distance a jittered stroke can sit from the clean boundary.
    pub fn jitter_bound(sigma: f64) -> f64 {
        JITTER_CLIP * sigma * 2f64.sqrt()
    }
}

/// Fraction of a `SUPERSAMPLE²` grid inside pixel `(px, py)` that satisfies `pred`.
///
/// Sample offsets are symmetric within the pixel, so sampling a mirrored
/// geometry visits exactly the mirrored sample positions.
fn supersample(px: f64, py: f64, pred: impl Fn(f64, f64) -> bool) -> f64 {
    let n = SUPERSAMPLE;
    let mut hits = 0;
    for a in 0..n {
        for b in 0..n {
            let x = px + (b as f64 + 0.5) / n as f64;
            let y = py + (a as f64 + 0.5) / n as f64;
            if pred(x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn polygon_edge_distance(poly: &[(f64, f64)], x: f64, y: f64) -> f64 {
    (0..poly.len())
        .map(|i| segment_distance((x, y), poly[i], poly[(i + 1) % poly.len()]))
        .fold(f64::INFINITY, f64::min)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn finish(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = quantize(*v);
    }
    t
}

/// Geometry of every instance, aligned with the generated dataset's item order.
pub fn instance_geometries(spec: &SynthSpec) -> Result<Vec<InstanceGeometry>, ConfigError> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let paired = spec.paired_per_category();
    let mut out = Vec::with_capacity(spec.num_categories * spec.instances_per_category);
    for c in 0..spec.num_categories {
        for k in 0..spec.instances_per_category {
            let geom = if k < paired && k % 2 == 1 {
                let base = spec.instance_id(c, k - 1);
                InstanceGeometry::sample(c, h, w, &mut seeds::stream(spec.seed, &[0, base])).mirror()
            } else {
                let id = spec.instance_id(c, k);
                InstanceGeometry::sample(c, h, w, &mut seeds::stream(spec.seed, &[0, id]))
            };
            out.push(geom);
        }
    }
    Ok(out)
}

/// Renders the full dataset; the result is tagged [`Split::All`].
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset, ConfigError> {
    let geometries = instance_geometries(spec)?;
    let paired = spec.paired_per_category();
    let rendered: Vec<(Tensor, Vec<Tensor>)> = geometries
        .par_iter()
        .enumerate()
        .map(|(pos, g)| {
            let id = pos as u64;
            let mut rng = seeds::stream(spec.seed, &[1, id]);
            let mut photo = g.render_photo_clean();
            if spec.background_noise > 0.0 {
                let noise = Normal::new(0.0, spec.background_noise).expect("finite noise");
                for v in photo.data_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            let sketches = (0..spec.sketches_per_instance)
                .map(|_| finish(g.jittered(spec.stroke_jitter, &mut rng).render_strokes()))
                .collect();
            (finish(photo), sketches)
        })
        .collect();

    let mut items = Vec::with_capacity(rendered.len());
    for c in 0..spec.num_categories {
        for k in 0..spec.instances_per_category {
            let id = spec.instance_id(c, k);
            let sibling = (k < paired).then(|| if k % 2 == 0 { id + 1 } else { id - 1 });
            items.push(SampleRecord {
                instance_id: id,
                category_id: c,
                photo_path: format!("rasters/photo_{id:06}.pgm"),
                sketch_paths: (0..spec.sketches_per_instance)
                    .map(|s| format!("rasters/sketch_{id:06}_{s}.pgm"))
                    .collect(),
                mirror_sibling_id: sibling,
            });
        }
    }
    let index = DatasetIndex::new(items, spec.num_categories, Split::All)?;
    let (photos, sketches) = rendered.into_iter().unzip();
    Dataset::new(index, photos, sketches)
}

/// Stratified train/test split that keeps mirror siblings on the same side.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), ConfigError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(ConfigError::invalid("test_fraction", "must lie strictly between 0 and 1"));
    }
    let index = &ds.index;
    let pos_of: std::collections::HashMap<u64, usize> =
        index.items().iter().enumerate().map(|(p, it)| (it.instance_id, p)).collect();
    let mut is_test = vec![false; ds.len()];
    for (cat, members) in index.by_category().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        let want = (n as f64 * test_fraction).round() as usize;
        if want == 0 || want >= n {
            return Err(ConfigError::invalid(
                "test_fraction",
                format!("category {cat} has {n} instances, too few to stratify at {test_fraction}"),
            ));
        }
        let mut units: Vec<Vec<usize>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for &p in members {
            if !seen.insert(p) {
                continue;
            }
            let sib = index.items()[p]
                .mirror_sibling_id
                .and_then(|s| pos_of.get(&s).copied())
                .filter(|&q| index.category(q) == cat);
            match sib {
                Some(q) if seen.insert(q) => units.push(vec![p, q]),
                _ => units.push(vec![p]),
            }
        }
        let mut rng = seeds::stream(seed, &[2, cat as u64]);
        for i in (1..units.len()).rev() {
            units.swap(i, rng.random_range(0..=i));
        }
        let mut remaining = want;
        for u in &units {
            if u.len() <= remaining {
                for &p in u {
                    is_test[p] = true;
                }
                remaining -= u.len();
            }
            if remaining == 0 {
                break;
            }
        }
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&p| !is_test[p]).collect();
    let test: Vec<usize> = (0..ds.len()).filter(|&p| is_test[p]).collect();
    Ok((ds.subset(&train, Split::Train)?, ds.subset(&test, Split::Test)?))
}
