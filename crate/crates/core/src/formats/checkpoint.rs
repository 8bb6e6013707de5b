//! Checkpoints as named sections: a JSON `meta` section plus raw float sections.

use serde::{Deserialize, Serialize};

use super::binary::{decode_f64s, f64_bytes, Container};
use crate::autodiff::{AdamState, Tensor};
use crate::encoders::{Encoder, EncoderConfig, ParamSet};
use crate::error::{FormatError, Result};
use crate::training::{Checkpoint, EpochRecord, LossConfig, TrainSchedule};

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    params: Vec<TensorMeta>,
    optimizer: AdamMeta,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    photo: EncoderMeta,
    sketch: EncoderMeta,
    loss: LossConfig,
    schedule: TrainSchedule,
    epoch: usize,
    history: Vec<EpochRecord>,
}

fn encoder_meta(enc: &Encoder, opt: &AdamState) -> EncoderMeta {
    EncoderMeta {
        config: enc.config.clone(),
        params: enc
            .params
            .names()
            .iter()
            .zip(enc.params.tensors())
            .map(|(n, t)| TensorMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer: AdamMeta {
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            step: opt.step,
        },
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Meta {
        photo: encoder_meta(&ckpt.photo, &ckpt.photo_optimizer),
        sketch: encoder_meta(&ckpt.sketch, &ckpt.sketch_optimizer),
        loss: ckpt.loss.clone(),
        schedule: ckpt.schedule.clone(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
    };
    let mut c = Container::default();
    c.push("meta", serde_json::to_vec(&meta).map_err(FormatError::from)?);
    for (name, enc, opt) in [
        ("photo", &ckpt.photo, &ckpt.photo_optimizer),
        ("sketch", &ckpt.sketch, &ckpt.sketch_optimizer),
    ] {
        c.push(format!("{name}.params"), f64_bytes(&enc.params.flatten()));
        c.push(format!("{name}.adam.m"), f64_bytes(&opt.m.concat()));
        c.push(format!("{name}.adam.v"), f64_bytes(&opt.v.concat()));
    }
    Ok(c.encode()?)
}

fn split_sizes(flat: Vec<f64>, sizes: &[usize], what: &str) -> Result<Vec<Vec<f64>>, FormatError> {
    if flat.len() != sizes.iter().sum::<usize>() {
        return Err(FormatError::Corrupt(format!("{what}: {} values, expected {}", flat.len(), sizes.iter().sum::<usize>())));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        out.push(flat[at..at + n].to_vec());
        at += n;
    }
    Ok(out)
}

fn restore(c: &Container, name: &str, meta: EncoderMeta) -> Result<(Encoder, AdamState)> {
    meta.config.validate()?;
    let sizes: Vec<usize> = meta.params.iter().map(|t| t.shape.iter().product()).collect();
    let values = split_sizes(decode_f64s(c.get(&format!("{name}.params"))?)?, &sizes, name)?;
    let mut names = Vec::with_capacity(sizes.len());
    let mut tensors = Vec::with_capacity(sizes.len());
    for (t, data) in meta.params.into_iter().zip(values) {
        tensors.push(Tensor::new(t.shape, data).map_err(FormatError::from)?);
        names.push(t.name);
    }
    let params = ParamSet::from_parts(names, tensors)
        .ok_or_else(|| FormatError::Corrupt(format!("{name}: duplicate parameter names")))?;
    let expected = meta.config.init_params(0)?;
    if expected.names() != params.names() || expected.sizes() != params.sizes() {
        return Err(FormatError::Corrupt(format!("{name}: parameters do not match the encoder configuration")).into());
    }
    let optimizer = AdamState {
        beta1: meta.optimizer.beta1,
        beta2: meta.optimizer.beta2,
        eps: meta.optimizer.eps,
        step: meta.optimizer.step,
        m: split_sizes(decode_f64s(c.get(&format!("{name}.adam.m"))?)?, &sizes, name)?,
        v: split_sizes(decode_f64s(c.get(&format!("{name}.adam.v"))?)?, &sizes, name)?,
    };
    Ok((
        Encoder {
            config: meta.config,
            params,
        },
        optimizer,
    ))
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let c = Container::decode(buf)?;
    let meta: Meta = serde_json::from_slice(c.get("meta")?).map_err(FormatError::from)?;
    let (photo, photo_optimizer) = restore(&c, "photo", meta.photo)?;
    let (sketch, sketch_optimizer) = restore(&c, "sketch", meta.sketch)?;
    Ok(Checkpoint {
        photo,
        sketch,
        photo_optimizer,
        sketch_optimizer,
        loss: meta.loss,
        schedule: meta.schedule,
        epoch: meta.epoch,
        history: meta.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{CnnEncoderConfig, VitEncoderConfig};

    #[test]
    fn round_trip_is_exact() {
        let cnn = EncoderConfig::Cnn(CnnEncoderConfig {
            stage_channels: vec![4, 8],
            ..CnnEncoderConfig::default()
        });
        let vit = EncoderConfig::Vit(VitEncoderConfig::default());
        let mut ckpt = Checkpoint::init(cnn, vit.clone(), LossConfig::default(), TrainSchedule::default());
        assert!(ckpt.is_err(), "embedding dims differ");
        ckpt = Checkpoint::init(vit.clone(), vit, LossConfig::default(), TrainSchedule::default());
        let mut ckpt = ckpt.unwrap();
        ckpt.photo_optimizer.m[0][0] = 0.125;
        ckpt.sketch_optimizer.step = 7;
        let back = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let vit = EncoderConfig::Vit(VitEncoderConfig::default());
        let ckpt = Checkpoint::init(vit.clone(), vit, LossConfig::default(), TrainSchedule::default()).unwrap();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
