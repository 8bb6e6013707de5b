//! Full multi-task loss gradients through both encoders, shared by the
//! gradient tests and the acceptance suite.

use flipsbir::autodiff::gradcheck::{FD_STEP, REL_ERR_FLOOR};
use flipsbir::autodiff::Tensor;
use flipsbir::encoders::{CnnEncoderConfig, EmbeddingPool, Encoder, EncoderConfig, VitEncoderConfig};
use flipsbir::sampling::BatchImages;
use flipsbir::training::{batch_loss, loss_and_gradients, LossConfig, TripletIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{INSTANCES, TOL};

fn image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    Tensor::new(vec![1, size, size], (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn batch(rng: &mut ChaCha8Rng, b: usize, size: usize) -> BatchImages {
    BatchImages {
        anchors: (0..b).map(|_| image(rng, size)).collect(),
        positives: (0..b).map(|_| image(rng, size)).collect(),
        negatives: (0..b).map(|_| image(rng, size)).collect(),
    }
}

/// Biases start at exactly zero, which parks dead relu regions on the kink;
/// random offsets move the test point to where the loss is differentiable.
fn randomize_biases(enc: &mut Encoder, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = enc.params.names().to_vec();
    for n in names.iter().filter(|n| n.ends_with(".b")) {
        for v in enc.params.get_mut(n).unwrap().data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

/// Worst relative error over `coords` random parameters of each encoder.
pub fn check(mut photo: Encoder, mut sketch: Encoder, size: usize, seed: u64, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize_biases(&mut photo, &mut rng);
    randomize_biases(&mut sketch, &mut rng);
    let b = 3;
    let images = batch(&mut rng, b, size);
    let classes = photo.config.num_classes();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let triplets = TripletIndex {
        anchor: vec![0, 1, 2, 0],
        positive: vec![0, 1, 2, 0],
        negative: vec![3, 4, 5, 1],
    };
    let cfg = LossConfig {
        margin: 5.0,
        classification_weight: 0.7,
    };
    let out = loss_and_gradients(&photo, &sketch, &images, &labels, &triplets, &cfg).unwrap();

    // Central differences of a loss near L carry roundoff around eps * L / h, so
    // gradients below L * 1e-6 are compared on an absolute scale.
    let floor = REL_ERR_FLOOR.max(out.stats.loss.abs() * 1e-6);
    let mut worst: f64 = 0.0;
    for (which, analytic) in [(0, &out.photo_grads), (1, &out.sketch_grads)] {
        let base = if which == 0 { &photo } else { &sketch };
        let flat_analytic: Vec<f64> = analytic.concat();
        let flat = base.params.flatten();
        for _ in 0..coords {
            let i = rng.random_range(0..flat.len());
            let eval = |delta: f64| {
                let mut p = flat.clone();
                p[i] += delta;
                let mut enc = base.clone();
                enc.params.assign_flat(&p);
                let (ph, sk) = if which == 0 { (&enc, &sketch) } else { (&photo, &enc) };
                batch_loss(ph, sk, &images, &labels, &triplets, &cfg).unwrap().loss
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let e = (flat_analytic[i] - numeric).abs() / flat_analytic[i].abs().max(numeric.abs()).max(floor);
            if e > TOL {
                eprintln!("seed {seed} encoder {which} coordinate {i}: analytic {:e} numeric {numeric:e}", flat_analytic[i]);
            }
            worst = worst.max(e);
        }
    }
    worst
}

/// Worst error over CNN encoder pairs, alternating Global1x1 and Spatial2x2 heads.
pub fn cnn_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let pool = if seed % 2 == 0 { EmbeddingPool::Global1x1 } else { EmbeddingPool::Spatial2x2 };
        let cfg = EncoderConfig::Cnn(CnnEncoderConfig {
            stage_channels: vec![3, 4],
            input_size: (8, 8),
            num_classes: 4,
            embedding_pool: pool,
            ..CnnEncoderConfig::default()
        });
        let photo = Encoder::init(cfg.clone(), 2 * seed).unwrap();
        let sketch = Encoder::init(cfg, 2 * seed + 1).unwrap();
        worst = worst.max(check(photo, sketch, 8, seed, 12));
    }
    worst
}

pub fn vit_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let cfg = EncoderConfig::Vit(VitEncoderConfig {
            patch_size: 4,
            model_dim: 8,
            num_heads: 2,
            depth: 1,
            embedding_dim: 6,
            num_classes: 4,
            input_size: (8, 8),
            ..VitEncoderConfig::default()
        });
        let photo = Encoder::init(cfg.clone(), 2 * seed).unwrap();
        let sketch = Encoder::init(cfg, 2 * seed + 1).unwrap();
        worst = worst.max(check(photo, sketch, 8, seed, 12));
    }
    worst
}
