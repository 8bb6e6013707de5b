//! Small residual CNN with a classification head on globally pooled
//! features and an embedding head on 1×1 or 2×2 adaptive pooling of the
//! same final feature maps.
//!
//! Layout: a 3×3 stem at full resolution, then one stage per entry of
//! `stage_channels`. Each stage opens with a 2×2 stride-2 convolution and
//! continues with `blocks_per_stage` residual blocks (two 3×3 convolutions
//! plus an identity shortcut). The 2×2 stride-2 downsampling tiles the
//! input into disjoint column pairs, so mirrored inputs stay aligned with
//! mirrored outputs whenever the kernels are mirror-symmetric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{var, ParamSet};
use super::{linear_row, EncoderConfig, EncoderOutput, ForwardVars};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{ConfigError, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingPool {
    Global1x1,
    Spatial2x2,
}

impl EmbeddingPool {
    pub fn cells(self) -> usize {
        match self {
            EmbeddingPool::Global1x1 => 1,
            EmbeddingPool::Spatial2x2 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnEncoderConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub num_classes: usize,
    pub embedding_pool: EmbeddingPool,
}

impl Default for CnnEncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            input_size: (32, 32),
            in_channels: 1,
            num_classes: 10,
            embedding_pool: EmbeddingPool::Global1x1,
        }
    }
}

impl CnnEncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.stage_channels.is_empty() {
            return Err(ConfigError::invalid("stage_channels", "need at least one stage"));
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 || self.num_classes == 0 {
            return Err(ConfigError::invalid("cnn", "channel and class counts must be positive"));
        }
        let (h, w) = self.input_size;
        let factor = 1usize << self.stage_channels.len();
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(ConfigError::invalid(
                "input_size",
                format!("{h}×{w} must be a positive multiple of {factor} for {} stages", self.stage_channels.len()),
            ));
        }
        let (fh, fw) = self.feature_size();
        let need = if self.embedding_pool == EmbeddingPool::Spatial2x2 { 2 } else { 1 };
        if fh < need || fw < need {
            return Err(ConfigError::invalid(
                "embedding_pool",
                format!("final feature map {fh}×{fw} is too small for 2×2 pooling"),
            ));
        }
        Ok(())
    }

    /// Spatial size of the final feature maps.
    pub fn feature_size(&self) -> (usize, usize) {
        let s = self.stage_channels.len() as u32;
        (self.input_size.0 >> s, self.input_size.1 >> s)
    }

    pub fn last_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn embedding_dim(&self) -> usize {
        self.last_channels() * self.embedding_pool.cells()
    }

    pub(crate) fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let c0 = self.stage_channels[0];
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        p.push_normal("stem.w", &[c0, self.in_channels, 3, 3], he(self.in_channels * 9), rng);
        p.push_full("stem.b", &[c0], 0.0);
        let mut prev = c0;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            p.push_normal(&format!("s{s}.down.w"), &[c, prev, 2, 2], he(prev * 4), rng);
            p.push_full(&format!("s{s}.down.b"), &[c], 0.0);
            for b in 0..self.blocks_per_stage {
                for conv in ["conv1", "conv2"] {
                    p.push_normal(&format!("s{s}.b{b}.{conv}.w"), &[c, c, 3, 3], he(c * 9), rng);
                    p.push_full(&format!("s{s}.b{b}.{conv}.b"), &[c], 0.0);
                }
            }
            prev = c;
        }
        p.push_normal("fc.w", &[prev, self.num_classes], (1.0 / prev as f64).sqrt(), rng);
        p.push_full("fc.b", &[self.num_classes], 0.0);
        p
    }

    pub(crate) fn forward_on(&self, tape: &mut Tape, params: &ParamSet, vars: &[Var], image: Var) -> Result<ForwardVars, TensorError> {
        let p = |name: &str| var(params, vars, name);
        let conv = |tape: &mut Tape, x: Var, name: &str, stride: usize, pad: usize| -> Result<Var, TensorError> {
            let y = tape.conv2d(x, p(&format!("{name}.w"))?, stride, pad)?;
            tape.add_channel_bias(y, p(&format!("{name}.b"))?)
        };

        let x = conv(tape, image, "stem", 1, 1)?;
        let mut x = tape.relu(x);
        for s in 0..self.stage_channels.len() {
            let y = conv(tape, x, &format!("s{s}.down"), 2, 0)?;
            x = tape.relu(y);
            for b in 0..self.blocks_per_stage {
                let h = conv(tape, x, &format!("s{s}.b{b}.conv1"), 1, 1)?;
                let h = tape.relu(h);
                let h = conv(tape, h, &format!("s{s}.b{b}.conv2"), 1, 1)?;
                let sum = tape.add(x, h)?;
                x = tape.relu(sum);
            }
        }

        let c = self.last_channels();
        let global = tape.adaptive_avg_pool2d(x, 1, 1)?;
        let feat = tape.reshape(global, vec![1, c])?;
        let logits = linear_row(tape, feat, p("fc.w")?, p("fc.b")?)?;
        let logits = tape.reshape(logits, vec![self.num_classes])?;
        let embedding = match self.embedding_pool {
            EmbeddingPool::Global1x1 => tape.flatten(global)?,
            EmbeddingPool::Spatial2x2 => {
                let pooled = tape.adaptive_avg_pool2d(x, 2, 2)?;
                tape.flatten(pooled)?
            }
        };
        Ok(ForwardVars {
            embedding,
            logits,
            attention: Vec::new(),
        })
    }
}

/// Forward pass of the CNN encoder without recording gradients.
pub fn cnn_forward(params: &ParamSet, config: &CnnEncoderConfig, image: &Tensor) -> Result<EncoderOutput, TensorError> {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let x = tape.constant(image.clone());
    let cfg = EncoderConfig::Cnn(config.clone());
    let out = cfg.forward_on(&mut tape, params, &vars, x)?;
    Ok(EncoderOutput {
        embedding: tape.value(out.embedding).data().to_vec(),
        logits: tape.value(out.logits).data().to_vec(),
    })
}

/// Replaces every convolution kernel with the average of itself and its
/// horizontal mirror, making each kernel left-right symmetric.
pub fn make_kernels_mirror_symmetric(params: &mut ParamSet) {
    for t in params.tensors_mut() {
        if t.ndim() != 4 {
            continue;
        }
        let mirrored = t.flip_horizontal();
        for (v, m) in t.data_mut().iter_mut().zip(mirrored.data()) {
            *v = 0.5 * (*v + m);
        }
    }
}

/// Permutes a flattened `[C×2×2]` embedding as if its feature map were mirrored:
/// within each channel the left and right cells trade places.
pub fn spatial_column_swap(embedding: &[f64]) -> Vec<f64> {
    embedding
        .chunks(4)
        .flat_map(|c| [c[1], c[0], c[3], c[2]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Encoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(pool: EmbeddingPool) -> CnnEncoderConfig {
        CnnEncoderConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            input_size: (16, 16),
            in_channels: 1,
            num_classes: 5,
            embedding_pool: pool,
        }
    }

    fn random_image(seed: u64, shape: [usize; 3]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn embedding_dims_follow_pool() {
        let mut cfg = CnnEncoderConfig::default();
        assert_eq!(cfg.embedding_dim(), 64);
        cfg.embedding_pool = EmbeddingPool::Spatial2x2;
        assert_eq!(cfg.embedding_dim(), 256);
        let enc = Encoder::init(EncoderConfig::Cnn(cfg), 1).unwrap();
        let out = enc.encode(&random_image(0, [1, 32, 32])).unwrap();
        assert_eq!(out.embedding.len(), 256);
        assert_eq!(out.logits.len(), 10);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let cfg = small(EmbeddingPool::Global1x1);
        let mut params = EncoderConfig::Cnn(cfg.clone()).init_params(3).unwrap();
        for t in params.get_mut("fc.w").unwrap().data_mut() {
            *t = 0.0;
        }
        let out = cnn_forward(&params, &cfg, &Tensor::zeros(&[1, 16, 16])).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_do_not_depend_on_embedding_pool() {
        let g = small(EmbeddingPool::Global1x1);
        let s = small(EmbeddingPool::Spatial2x2);
        let params = EncoderConfig::Cnn(g.clone()).init_params(9).unwrap();
        let img = random_image(4, [1, 16, 16]);
        let a = cnn_forward(&params, &g, &img).unwrap();
        let b = cnn_forward(&params, &s, &img).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(b.embedding.len(), 4 * a.embedding.len());
    }

    #[test]
    fn symmetric_kernels_give_flip_invariance_and_equivariance() {
        let g = small(EmbeddingPool::Global1x1);
        let s = small(EmbeddingPool::Spatial2x2);
        let mut params = EncoderConfig::Cnn(g.clone()).init_params(5).unwrap();
        make_kernels_mirror_symmetric(&mut params);
        let img = random_image(8, [1, 16, 16]);
        let flipped = img.flip_horizontal();

        let a = cnn_forward(&params, &g, &img).unwrap();
        let b = cnn_forward(&params, &g, &flipped).unwrap();
        let err = a.embedding.iter().zip(&b.embedding).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "global embedding moved by {err}");

        let a = cnn_forward(&params, &s, &img).unwrap();
        let b = cnn_forward(&params, &s, &flipped).unwrap();
        let swapped = spatial_column_swap(&a.embedding);
        let err = swapped.iter().zip(&b.embedding).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "spatial embedding not equivariant: {err}");
    }

    #[test]
    fn unsymmetric_kernels_see_orientation() {
        let g = small(EmbeddingPool::Global1x1);
        let params = EncoderConfig::Cnn(g.clone()).init_params(5).unwrap();
        let img = random_image(8, [1, 16, 16]);
        let a = cnn_forward(&params, &g, &img).unwrap();
        let b = cnn_forward(&params, &g, &img.flip_horizontal()).unwrap();
        assert_ne!(a.embedding, b.embedding);
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let mut cfg = small(EmbeddingPool::Spatial2x2);
        cfg.input_size = (4, 4);
        assert!(cfg.validate().is_err());
        cfg.input_size = (18, 18);
        assert!(cfg.validate().is_err());
        cfg.stage_channels.clear();
        assert!(cfg.validate().is_err());

        let cfg = small(EmbeddingPool::Global1x1);
        let params = EncoderConfig::Cnn(cfg.clone()).init_params(0).unwrap();
        assert!(cnn_forward(&params, &cfg, &Tensor::zeros(&[1, 8, 8])).is_err());
    }
}
