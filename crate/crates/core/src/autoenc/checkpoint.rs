//! Binary checkpoint: magic, version, loss weights, then each stack as a
//! layer count followed by per-layer records. Parameters are stored
//! row-major as little-endian f32.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::layers::{BatchNorm, Layer, Linear, Mode};
use super::{AEModel, LossWeights};
use crate::error::Result;
use crate::io::{atomic_write, read_file, Decoder, Encoder};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSAE";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_LINEAR: u8 = 0;
const TAG_BN: u8 = 1;
const TAG_GELU: u8 = 2;
const TAG_SPHERE: u8 = 3;

fn put_vec(e: &mut Encoder, v: &DVector<f64>) {
    for x in v.iter() {
        e.f32(*x as f32);
    }
}

fn encode_stack(e: &mut Encoder, layers: &[Layer]) {
    e.u32(layers.len() as u32);
    for l in layers {
        match l {
            Layer::Linear(lin) => {
                e.u8(TAG_LINEAR);
                e.u32(lin.in_dim() as u32);
                e.u32(lin.out_dim() as u32);
                e.u8(lin.bias.is_some() as u8);
                for r in 0..lin.weight.nrows() {
                    for c in 0..lin.weight.ncols() {
                        e.f32(lin.weight[(r, c)] as f32);
                    }
                }
                if let Some(b) = &lin.bias {
                    put_vec(e, b);
                }
            }
            Layer::BatchNorm(bn) => {
                e.u8(TAG_BN);
                e.u32(bn.dim() as u32);
                e.f64(bn.eps);
                e.f64(bn.momentum);
                put_vec(e, &bn.gamma);
                put_vec(e, &bn.beta);
                put_vec(e, &bn.running_mean);
                put_vec(e, &bn.running_var);
            }
            Layer::Gelu => e.u8(TAG_GELU),
            Layer::SphereNormalize => e.u8(TAG_SPHERE),
        }
    }
}

fn get_vec(d: &mut Decoder, n: usize, what: &str) -> Result<DVector<f64>> {
    let n = d.count(n as u64, 4, what)?;
    let mut v = DVector::zeros(n);
    for k in 0..n {
        v[k] = d.f32(what)? as f64;
    }
    Ok(v)
}

fn decode_stack(d: &mut Decoder, what: &str) -> Result<Vec<Layer>> {
    let count = d.u32(what)? as u64;
    let count = d.count(count, 1, what)?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = match d.u8("layer tag")? {
            TAG_LINEAR => {
                let fan_in = d.u32("linear fan-in")? as usize;
                let fan_out = d.u32("linear fan-out")? as usize;
                let has_bias = match d.u8("bias flag")? {
                    0 => false,
                    1 => true,
                    f => return Err(d.malformed(format!("bias flag {f}"))),
                };
                let n = d.count((fan_in as u64).saturating_mul(fan_out as u64), 4, "linear weight")?;
                let mut w = Vec::with_capacity(n);
                for _ in 0..n {
                    w.push(d.f32("linear weight")? as f64);
                }
                let weight = DMatrix::from_row_slice(fan_out, fan_in, &w);
                let bias = if has_bias { Some(get_vec(d, fan_out, "linear bias")?) } else { None };
                Layer::Linear(Linear { weight, bias })
            }
            TAG_BN => {
                let dim = d.u32("batch norm width")? as usize;
                let eps = d.f64("batch norm eps")?;
                let momentum = d.f64("batch norm momentum")?;
                Layer::BatchNorm(BatchNorm {
                    gamma: get_vec(d, dim, "gamma")?,
                    beta: get_vec(d, dim, "beta")?,
                    running_mean: get_vec(d, dim, "running mean")?,
                    running_var: get_vec(d, dim, "running variance")?,
                    momentum,
                    eps,
                })
            }
            TAG_GELU => Layer::Gelu,
            TAG_SPHERE => Layer::SphereNormalize,
            t => return Err(d.malformed(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    Ok(layers)
}

pub fn encode_checkpoint(model: &AEModel) -> Vec<u8> {
    let mut e = Encoder::new();
    e.bytes(&CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION);
    e.f64(model.loss_weights.mse);
    e.f64(model.loss_weights.cosine);
    encode_stack(&mut e, &model.encoder);
    encode_stack(&mut e, &model.decoder);
    e.buf
}

pub fn save_checkpoint(model: &AEModel, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model))
}

/// Loads a checkpoint; the model comes back in inference mode.
pub fn load_checkpoint(path: &Path) -> Result<AEModel> {
    let bytes = read_file(path)?;
    decode_checkpoint(path, &bytes)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<AEModel> {
    let mut d = Decoder::new(path, bytes);
    d.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let loss_weights = LossWeights {
        mse: d.f64("mse weight")?,
        cosine: d.f64("cosine weight")?,
    };
    let encoder = decode_stack(&mut d, "encoder layer count")?;
    let decoder = decode_stack(&mut d, "decoder layer count")?;
    d.finish()?;
    let mut model = AEModel::from_layers(encoder, decoder, loss_weights).map_err(|e| d.malformed(e.to_string()))?;
    model.set_mode(Mode::Inference);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::AEConfig;
    use crate::error::Error;

    fn model() -> AEModel {
        let c = AEConfig {
            encoder_dims: vec![6, 4, 3],
            decoder_dims: vec![3, 4, 6],
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 1,
            seed: 5,
            loss_weights: LossWeights { mse: 2.0, cosine: 0.5 },
            batch_norm: true,
        };
        AEModel::new(&c).unwrap()
    }

    #[test]
    fn round_trip_within_f32() {
        let m = model();
        let p = Path::new("mem.fsae");
        let back = decode_checkpoint(p, &encode_checkpoint(&m)).unwrap();
        assert_eq!(back.mode, Mode::Inference);
        assert_eq!(back.loss_weights, m.loss_weights);
        assert_eq!(back.param_count(), m.param_count());
        for (a, b) in m.encoder.iter().chain(&m.decoder).zip(back.encoder.iter().chain(&back.decoder)) {
            for (pa, pb) in a.params().iter().zip(b.params()) {
                for (x, y) in pa.iter().zip(pb) {
                    assert_eq!(*x as f32 as f64, *y);
                }
            }
        }
        // a second trip is exact
        let again = decode_checkpoint(p, &encode_checkpoint(&back)).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem.fsae");
        let bytes = encode_checkpoint(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(p, &bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(p, &bad), Err(Error::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(decode_checkpoint(p, &bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(p, &long), Err(Error::Malformed { .. })));
    }
}
