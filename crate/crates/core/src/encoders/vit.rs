//! Toy vision transformer: non-overlapping patches, a learned class token,
//! learned position embeddings and pre-norm encoder layers. The final
//! class-token features feed both the embedding head and the logits head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{var, ParamSet};
use super::{linear_row, EncoderConfig, EncoderOutput, ForwardVars};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{ConfigError, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitEncoderConfig {
    pub patch_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub in_channels: usize,
}

impl Default for VitEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            model_dim: 32,
            num_heads: 4,
            depth: 2,
            mlp_ratio: 2,
            embedding_dim: 32,
            num_classes: 10,
            input_size: (32, 32),
            in_channels: 1,
        }
    }
}

/// Number of patches for an image of `size` cut into `patch × patch` tiles.
pub fn patch_count(size: (usize, usize), patch: usize) -> usize {
    (size.0 / patch) * (size.1 / patch)
}

impl VitEncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let (h, w) = self.input_size;
        if self.patch_size == 0 || h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(ConfigError::invalid(
                "patch_size",
                format!("{} must divide the input size {h}×{w}", self.patch_size),
            ));
        }
        if self.num_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ConfigError::invalid(
                "num_heads",
                format!("model_dim {} must be divisible by num_heads {}", self.model_dim, self.num_heads),
            ));
        }
        if self.mlp_ratio == 0 || self.embedding_dim == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(ConfigError::invalid("vit", "sizes must be positive"));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        patch_count(self.input_size, self.patch_size) + 1
    }

    fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub(crate) fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let d = self.model_dim;
        let hidden = d * self.mlp_ratio;
        let lecun = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let mut p = ParamSet::new();
        p.push_normal("patch.w", &[self.patch_dim(), d], lecun(self.patch_dim()), rng);
        p.push_full("patch.b", &[d], 0.0);
        p.push_normal("cls", &[1, d], 0.02, rng);
        p.push_normal("pos", &[self.num_tokens(), d], 0.02, rng);
        for l in 0..self.depth {
            p.push_full(&format!("l{l}.ln1.g"), &[d], 1.0);
            p.push_full(&format!("l{l}.ln1.b"), &[d], 0.0);
            p.push_normal(&format!("l{l}.qkv.w"), &[d, 3 * d], lecun(d), rng);
            p.push_full(&format!("l{l}.qkv.b"), &[3 * d], 0.0);
            p.push_normal(&format!("l{l}.proj.w"), &[d, d], lecun(d), rng);
            p.push_full(&format!("l{l}.proj.b"), &[d], 0.0);
            p.push_full(&format!("l{l}.ln2.g"), &[d], 1.0);
            p.push_full(&format!("l{l}.ln2.b"), &[d], 0.0);
            p.push_normal(&format!("l{l}.fc1.w"), &[d, hidden], (2.0 / d as f64).sqrt(), rng);
            p.push_full(&format!("l{l}.fc1.b"), &[hidden], 0.0);
            p.push_normal(&format!("l{l}.fc2.w"), &[hidden, d], lecun(hidden), rng);
            p.push_full(&format!("l{l}.fc2.b"), &[d], 0.0);
        }
        p.push_full("ln_f.g", &[d], 1.0);
        p.push_full("ln_f.b", &[d], 0.0);
        p.push_normal("emb.w", &[d, self.embedding_dim], lecun(d), rng);
        p.push_full("emb.b", &[self.embedding_dim], 0.0);
        p.push_normal("head.w", &[d, self.num_classes], lecun(d), rng);
        p.push_full("head.b", &[self.num_classes], 0.0);
        p
    }

    /// Flat indices that rearrange a `[C×H×W]` image into `[patches × C·p·p]`,
    /// patches in row-major grid order.
    fn patch_indices(&self) -> Vec<usize> {
        let (h, w) = self.input_size;
        let ps = self.patch_size;
        let mut idx = Vec::with_capacity(self.in_channels * h * w);
        for gy in 0..h / ps {
            for gx in 0..w / ps {
                for c in 0..self.in_channels {
                    for r in 0..ps {
                        for s in 0..ps {
                            idx.push((c * h + gy * ps + r) * w + gx * ps + s);
                        }
                    }
                }
            }
        }
        idx
    }

    pub(crate) fn forward_on(&self, tape: &mut Tape, params: &ParamSet, vars: &[Var], image: Var) -> Result<ForwardVars, TensorError> {
        let p = |name: &str| var(params, vars, name);
        let d = self.model_dim;
        let heads = self.num_heads;
        let dh = d / heads;
        let n_patches = self.num_tokens() - 1;

        let patches = tape.gather(image, &self.patch_indices(), vec![n_patches, self.patch_dim()])?;
        let tokens = linear_row(tape, patches, p("patch.w")?, p("patch.b")?)?;
        let x = tape.concat_rows(&[p("cls")?, tokens])?;
        let mut x = tape.add(x, p("pos")?)?;

        let mut attention = Vec::with_capacity(self.depth * heads);
        for l in 0..self.depth {
            let h = tape.layer_norm(x, p(&format!("l{l}.ln1.g"))?, p(&format!("l{l}.ln1.b"))?)?;
            let qkv = linear_row(tape, h, p(&format!("l{l}.qkv.w"))?, p(&format!("l{l}.qkv.b"))?)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
                let k = tape.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh)?;
                let v = tape.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let probs = tape.softmax(scores);
                attention.push(probs);
                outs.push(tape.matmul(probs, v)?);
            }
            let merged = tape.concat_cols(&outs)?;
            let proj = linear_row(tape, merged, p(&format!("l{l}.proj.w"))?, p(&format!("l{l}.proj.b"))?)?;
            x = tape.add(x, proj)?;

            let h = tape.layer_norm(x, p(&format!("l{l}.ln2.g"))?, p(&format!("l{l}.ln2.b"))?)?;
            let h = linear_row(tape, h, p(&format!("l{l}.fc1.w"))?, p(&format!("l{l}.fc1.b"))?)?;
            let h = tape.gelu(h);
            let h = linear_row(tape, h, p(&format!("l{l}.fc2.w"))?, p(&format!("l{l}.fc2.b"))?)?;
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm(x, p("ln_f.g")?, p("ln_f.b")?)?;
        let cls = tape.slice_rows(x, 0, 1)?;
        let emb = linear_row(tape, cls, p("emb.w")?, p("emb.b")?)?;
        let embedding = tape.flatten(emb)?;
        let logits = linear_row(tape, cls, p("head.w")?, p("head.b")?)?;
        let logits = tape.flatten(logits)?;
        Ok(ForwardVars {
            embedding,
            logits,
            attention,
        })
    }
}

/// Forward pass of the transformer encoder without recording gradients.
pub fn vit_forward(params: &ParamSet, config: &VitEncoderConfig, image: &Tensor) -> Result<EncoderOutput, TensorError> {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let x = tape.constant(image.clone());
    let cfg = EncoderConfig::Vit(config.clone());
    let out = cfg.forward_on(&mut tape, params, &vars, x)?;
    Ok(EncoderOutput {
        embedding: tape.value(out.embedding).data().to_vec(),
        logits: tape.value(out.logits).data().to_vec(),
    })
}
