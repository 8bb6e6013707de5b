//! Photo and sketch encoders.
//!
//! Both families map a `[C×H×W]` image to an unnormalized embedding and a
//! vector of class logits. Embeddings are compared with plain Euclidean
//! distance downstream; nothing here rescales them.

mod cnn;
mod params;
mod vit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{ConfigError, TensorError};

pub use cnn::{cnn_forward, make_kernels_mirror_symmetric, spatial_column_swap, CnnEncoderConfig, EmbeddingPool};
pub use params::ParamSet;
pub use vit::{patch_count, vit_forward, VitEncoderConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub embedding: Var,
    pub logits: Var,
    /// Attention probability matrices, one per head per layer (transformer only).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Cnn(CnnEncoderConfig),
    Vit(VitEncoderConfig),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            EncoderConfig::Cnn(c) => c.validate(),
            EncoderConfig::Vit(c) => c.validate(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            EncoderConfig::Cnn(c) => c.embedding_dim(),
            EncoderConfig::Vit(c) => c.embedding_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            EncoderConfig::Cnn(c) => c.num_classes,
            EncoderConfig::Vit(c) => c.num_classes,
        }
    }

    /// Expected `[C, H, W]` of input images.
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            EncoderConfig::Cnn(c) => [c.in_channels, c.input_size.0, c.input_size.1],
            EncoderConfig::Vit(c) => [c.in_channels, c.input_size.0, c.input_size.1],
        }
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet, ConfigError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match self {
            EncoderConfig::Cnn(c) => c.init_params(&mut rng),
            EncoderConfig::Vit(c) => c.init_params(&mut rng),
        })
    }

    /// Records a forward pass of `image` using already-bound parameter vars.
    pub fn forward_on(&self, tape: &mut Tape, params: &ParamSet, vars: &[Var], image: Var) -> Result<ForwardVars, TensorError> {
        let expected = self.input_shape();
        if tape.shape(image) != expected {
            return Err(TensorError::mismatch("encoder input", tape.shape(image), &expected));
        }
        match self {
            EncoderConfig::Cnn(c) => c.forward_on(tape, params, vars, image),
            EncoderConfig::Vit(c) => c.forward_on(tape, params, vars, image),
        }
    }
}

/// An encoder configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Encoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, ConfigError> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    /// Binds parameters as differentiable leaves and records a forward pass.
    pub fn forward_tape(&self, tape: &mut Tape, image: &Tensor) -> Result<(Vec<Var>, ForwardVars), TensorError> {
        let vars = self.params.bind(tape);
        let x = tape.constant(image.clone());
        let out = self.config.forward_on(tape, &self.params, &vars, x)?;
        Ok((vars, out))
    }

    /// Inference-only forward pass.
    pub fn encode(&self, image: &Tensor) -> Result<EncoderOutput, TensorError> {
        let mut tape = Tape::new();
        let vars = self.params.bind_constant(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.config.forward_on(&mut tape, &self.params, &vars, x)?;
        Ok(EncoderOutput {
            embedding: tape.value(out.embedding).data().to_vec(),
            logits: tape.value(out.logits).data().to_vec(),
        })
    }
}

pub(crate) fn linear_row(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}
