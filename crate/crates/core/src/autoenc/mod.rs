//! MLP autoencoder that compresses high-dimensional feature vectors onto a
//! unit hypersphere and maps them back.
//!
//! The encoder is `Linear → BN → GeLU → … → Linear → sphere_normalize`, the
//! decoder `Linear → GeLU → … → Linear`. Linear layers that feed a batch
//! norm carry no bias (the norm's shift subsumes it). Training minimises
//! `mse_w·mean((x − x̂)²) + cos_w·mean(1 − cos(x, x̂))` with AdamW.

mod adamw;
mod checkpoint;
mod layers;

pub use adamw::AdamW;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{gelu, gelu_grad, sphere_normalize, sphere_normalize_jacobian, BatchNorm, Layer, Linear, Mode};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::Cache;

const COSINE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub cosine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, cosine: 1.0 }
    }
}

fn default_true() -> bool {
    true
}

/// Autoencoder architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AEConfig {
    /// Widths from the input down to the latent size.
    pub encoder_dims: Vec<usize>,
    /// Widths from the latent size back up to the input size.
    pub decoder_dims: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Interleave batch norm in the encoder.
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

impl AEConfig {
    /// 3584 → 2048 → 1024 → 512 → 256 encoder with the mirrored decoder,
    /// batch 256, AdamW at 1e-4 for 100 epochs.
    pub fn full_scale() -> Self {
        Self {
            encoder_dims: vec![3584, 2048, 1024, 512, 256],
            decoder_dims: vec![256, 512, 1024, 2048, 2048, 3584],
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            loss_weights: LossWeights::default(),
            batch_norm: true,
        }
    }

    /// Desk-scale 64 → 32 → 16 → 32 → 64 configuration.
    pub fn desk_scale() -> Self {
        Self {
            encoder_dims: vec![64, 32, 16],
            decoder_dims: vec![16, 32, 64],
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 250,
            seed: 0,
            loss_weights: LossWeights::default(),
            batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.encoder_dims.len() < 2 || self.decoder_dims.len() < 2 {
            return bad("encoder and decoder need at least two widths each".into());
        }
        if self.encoder_dims.iter().chain(&self.decoder_dims).any(|&d| d == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.encoder_dims.last() != self.decoder_dims.first() {
            return bad(format!(
                "encoder output {} must equal decoder input {}",
                self.encoder_dims.last().unwrap(),
                self.decoder_dims[0]
            ));
        }
        if self.decoder_dims.last() != self.encoder_dims.first() {
            return bad(format!(
                "decoder output {} must equal encoder input {}",
                self.decoder_dims.last().unwrap(),
                self.encoder_dims[0]
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.batch_norm && self.batch_size < 2 {
            return bad("batch norm needs batch_size >= 2".into());
        }
        Ok(())
    }

    /// Human-readable layer schedule, e.g. `["linear 64->32", "bn 32", ...]`.
    pub fn layer_schedule(&self) -> (Vec<String>, Vec<String>) {
        let describe = |layers: Vec<LayerSpec>| {
            layers
                .into_iter()
                .map(|l| match l {
                    LayerSpec::Linear { fan_in, fan_out, .. } => format!("linear {fan_in}->{fan_out}"),
                    LayerSpec::BatchNorm(d) => format!("bn {d}"),
                    LayerSpec::Gelu => "gelu".to_string(),
                    LayerSpec::Sphere => "sphere".to_string(),
                })
                .collect()
        };
        (describe(self.encoder_specs()), describe(self.decoder_specs()))
    }

    /// Trainable parameter count of the configured model.
    pub fn param_count(&self) -> usize {
        self.encoder_specs()
            .into_iter()
            .chain(self.decoder_specs())
            .map(|l| match l {
                LayerSpec::Linear { fan_in, fan_out, bias } => fan_in * fan_out + if bias { fan_out } else { 0 },
                LayerSpec::BatchNorm(d) => 2 * d,
                _ => 0,
            })
            .sum()
    }

    fn encoder_specs(&self) -> Vec<LayerSpec> {
        let dims = &self.encoder_dims;
        let mut out = Vec::new();
        for k in 0..dims.len() - 1 {
            let last = k == dims.len() - 2;
            out.push(LayerSpec::Linear {
                fan_in: dims[k],
                fan_out: dims[k + 1],
                bias: last || !self.batch_norm,
            });
            if !last {
                if self.batch_norm {
                    out.push(LayerSpec::BatchNorm(dims[k + 1]));
                }
                out.push(LayerSpec::Gelu);
            }
        }
        out.push(LayerSpec::Sphere);
        out
    }

    fn decoder_specs(&self) -> Vec<LayerSpec> {
        let dims = &self.decoder_dims;
        let mut out = Vec::new();
        for k in 0..dims.len() - 1 {
            out.push(LayerSpec::Linear {
                fan_in: dims[k],
                fan_out: dims[k + 1],
                bias: true,
            });
            if k < dims.len() - 2 {
                out.push(LayerSpec::Gelu);
            }
        }
        out
    }
}

enum LayerSpec {
    Linear { fan_in: usize, fan_out: usize, bias: bool },
    BatchNorm(usize),
    Gelu,
    Sphere,
}

fn build(specs: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    specs
        .into_iter()
        .map(|s| match s {
            LayerSpec::Linear { fan_in, fan_out, bias } => Layer::Linear(Linear::init(fan_in, fan_out, bias, rng)),
            LayerSpec::BatchNorm(d) => Layer::BatchNorm(BatchNorm::new(d)),
            LayerSpec::Gelu => Layer::Gelu,
            LayerSpec::Sphere => Layer::SphereNormalize,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AEModel {
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub mode: Mode,
    pub loss_weights: LossWeights,
}

fn stack_dims(layers: &[Layer], what: &str) -> Result<(usize, usize)> {
    let mut current: Option<usize> = None;
    let mut first = None;
    for l in layers {
        if let Some(i) = l.in_dim() {
            if let Some(c) = current {
                if c != i {
                    return Err(Error::dim(format!("{what} layer input"), c, i));
                }
            }
            first.get_or_insert(i);
        }
        if let Some(o) = l.out_dim() {
            current = Some(o);
        }
    }
    match (first, current) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::InvalidArgument(format!("{what} has no linear layer"))),
    }
}

impl AEModel {
    /// Freshly initialised model in training mode.
    pub fn new(config: &AEConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = build(config.encoder_specs(), &mut rng);
        let decoder = build(config.decoder_specs(), &mut rng);
        Self::from_layers(encoder, decoder, config.loss_weights)
    }

    /// Model from explicit layer stacks; checks that widths chain.
    pub fn from_layers(encoder: Vec<Layer>, decoder: Vec<Layer>, loss_weights: LossWeights) -> Result<Self> {
        let (_, latent) = stack_dims(&encoder, "encoder")?;
        let (dec_in, _) = stack_dims(&decoder, "decoder")?;
        if latent != dec_in {
            return Err(Error::dim("decoder input", latent, dec_in));
        }
        Ok(Self {
            encoder,
            decoder,
            mode: Mode::Training,
            loss_weights,
        })
    }

    pub fn input_dim(&self) -> usize {
        stack_dims(&self.encoder, "encoder").expect("validated").0
    }

    pub fn latent_dim(&self) -> usize {
        stack_dims(&self.encoder, "encoder").expect("validated").1
    }

    pub fn output_dim(&self) -> usize {
        stack_dims(&self.decoder, "decoder").expect("validated").1
    }

    pub fn param_count(&self) -> usize {
        self.layers().flat_map(|l| l.params()).map(|p| p.len()).sum()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).flat_map(|l| l.params_mut()).collect()
    }

    fn run(layers: &[Layer], x: &DMatrix<f64>, mode: Mode) -> Result<(DMatrix<f64>, Vec<Cache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(layers.len());
        for l in layers {
            let (y, c) = l.forward(&h, mode)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    /// Encodes a batch (one sample per row). Running statistics are not
    /// touched.
    pub fn encode(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("encoder input width", self.input_dim(), x.ncols()));
        }
        Ok(Self::run(&self.encoder, x, self.mode)?.0)
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::dim("decoder input width", self.latent_dim(), z.ncols()));
        }
        Ok(Self::run(&self.decoder, z, self.mode)?.0)
    }

    pub fn reconstruct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.decode(&self.encode(x)?)
    }

    /// Reconstruction loss of a batch in the current mode.
    pub fn loss(&self, x: &DMatrix<f64>) -> Result<f64> {
        Ok(reconstruction_loss(x, &self.reconstruct(x)?, self.loss_weights).0)
    }

    /// Loss and parameter gradients (same block order as the parameters).
    /// With `update_stats`, batch-norm running estimates absorb this batch.
    fn loss_and_grad(&mut self, x: &DMatrix<f64>, update_stats: bool) -> Result<(f64, Vec<Vec<f64>>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("encoder input width", self.input_dim(), x.ncols()));
        }
        let (z, enc_caches) = Self::run(&self.encoder, x, self.mode)?;
        let (xh, dec_caches) = Self::run(&self.decoder, &z, self.mode)?;
        let (loss, mut grad) = reconstruction_loss(x, &xh, self.loss_weights);

        let mut blocks: Vec<Vec<Vec<f64>>> = Vec::new();
        for (l, c) in self.decoder.iter().zip(&dec_caches).rev() {
            let (dx, g) = l.backward(c, &grad);
            blocks.push(g.0);
            grad = dx;
        }
        for (l, c) in self.encoder.iter().zip(&enc_caches).rev() {
            let (dx, g) = l.backward(c, &grad);
            blocks.push(g.0);
            grad = dx;
        }
        blocks.reverse();

        if update_stats && self.mode == Mode::Training {
            for (l, c) in self.encoder.iter_mut().zip(&enc_caches) {
                l.update_running(c);
            }
            for (l, c) in self.decoder.iter_mut().zip(&dec_caches) {
                l.update_running(c);
            }
        }
        Ok((loss, blocks.into_iter().flatten().collect()))
    }
}

/// Loss value and its gradient with respect to the reconstruction.
pub fn reconstruction_loss(x: &DMatrix<f64>, xh: &DMatrix<f64>, w: LossWeights) -> (f64, DMatrix<f64>) {
    let (b, d) = x.shape();
    let diff = xh - x;
    let mse = diff.norm_squared() / (b * d) as f64;
    let mut grad = &diff * (2.0 * w.mse / (b * d) as f64);
    let mut cos_term = 0.0;
    for i in 0..b {
        let (xr, hr) = (x.row(i), xh.row(i));
        let (nx, nh) = (xr.norm(), hr.norm());
        if nx < COSINE_NORM_EPS || nh < COSINE_NORM_EPS {
            continue;
        }
        let c = xr.dot(&hr) / (nx * nh);
        cos_term += 1.0 - c;
        // d(1 − cos)/dx̂ = −(x/(‖x‖‖x̂‖) − cos·x̂/‖x̂‖²)
        let dc = xr / (nx * nh) - hr * (c / (nh * nh));
        let mut g = grad.row_mut(i);
        g -= dc * (w.cosine / b as f64);
    }
    (w.mse * mse + w.cosine * cos_term / b as f64, grad)
}

/// Trains a fresh model. Returns it in inference mode with the mean
/// training loss of every epoch.
pub fn train(config: &AEConfig, data: &DMatrix<f64>) -> Result<(AEModel, Vec<f64>)> {
    let mut model = AEModel::new(config)?;
    let history = train_model(&mut model, config, data)?;
    Ok((model, history))
}

/// Continues training `model` with the schedule in `config`.
pub fn train_model(model: &mut AEModel, config: &AEConfig, data: &DMatrix<f64>) -> Result<Vec<f64>> {
    config.validate()?;
    if data.ncols() != model.input_dim() {
        return Err(Error::dim("training data width", model.input_dim(), data.ncols()));
    }
    let m = data.nrows();
    let has_bn = model.layers().any(|l| matches!(l, Layer::BatchNorm(_)));
    if m == 0 || (has_bn && m < 2) {
        return Err(Error::InvalidArgument(format!("not enough training rows ({m})")));
    }
    model.set_mode(Mode::Training);
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..m).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if has_bn && chunk.len() < 2 {
                continue;
            }
            let batch = DMatrix::from_fn(chunk.len(), data.ncols(), |i, j| data[(chunk[i], j)]);
            let (loss, grads) = model.loss_and_grad(&batch, true)?;
            opt.step(&mut model.params_mut(), &grads);
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        history.push(total / seen as f64);
    }
    model.set_mode(Mode::Inference);
    Ok(history)
}

/// Largest relative error between the analytic gradient and central finite
/// differences with step `epsilon`, over every trainable parameter:
/// `|g_a − g_n| / max(1e-8, |g_a| + |g_n|)`. Evaluated in training mode.
pub fn grad_check(model: &AEModel, x: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    let mut m = model.clone();
    m.set_mode(Mode::Training);
    let (_, analytic) = m.loss_and_grad(x, false)?;
    let mut worst = 0.0f64;
    let sizes: Vec<usize> = analytic.iter().map(|g| g.len()).collect();
    for (b, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = m.params_mut()[b][k];
            m.params_mut()[b][k] = orig + epsilon;
            let up = m.loss(x)?;
            m.params_mut()[b][k] = orig - epsilon;
            let down = m.loss(x)?;
            m.params_mut()[b][k] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[b][k];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

/// Overfitting fixture: 256 unit-norm rows of width 64 spanning a planted
/// rank-4 subspace, with a 64 → 256 → 16 → 256 → 64 model trained for
/// 2000 AdamW steps (batch 64, 500 epochs) at lr 1e-4.
pub fn overfit_fixture(seed: u64) -> (AEConfig, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, dim, rank) = (256, 64, 4);
    let basis = DMatrix::from_fn(rank, dim, |_, _| rng.gen_range(-1.0..1.0));
    let coeffs = DMatrix::from_fn(rows, rank, |_, _| rng.gen_range(-1.0..1.0));
    let mut x = coeffs * basis;
    for mut r in x.row_iter_mut() {
        let n = r.norm();
        r /= n;
    }
    let config = AEConfig {
        encoder_dims: vec![dim, 256, 16],
        decoder_dims: vec![16, 256, dim],
        lr: 1e-4,
        weight_decay: 0.0,
        batch_size: 64,
        epochs: 500,
        seed,
        loss_weights: LossWeights::default(),
        batch_norm: true,
    };
    (config, x)
}

/// Loss of predicting the column mean for every row.
pub fn mean_predictor_loss(x: &DMatrix<f64>, w: LossWeights) -> f64 {
    let mean = x.row_mean();
    let pred = DMatrix::from_fn(x.nrows(), x.ncols(), |_, j| mean[j]);
    reconstruction_loss(x, &pred, w).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_config(seed: u64) -> AEConfig {
        AEConfig {
            encoder_dims: vec![5, 4, 3],
            decoder_dims: vec![3, 4, 5],
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 1,
            seed,
            loss_weights: LossWeights::default(),
            batch_norm: true,
        }
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn full_scale_schedule() {
        let c = AEConfig::full_scale();
        c.validate().unwrap();
        let (enc, dec) = c.layer_schedule();
        assert_eq!(
            enc,
            vec![
                "linear 3584->2048",
                "bn 2048",
                "gelu",
                "linear 2048->1024",
                "bn 1024",
                "gelu",
                "linear 1024->512",
                "bn 512",
                "gelu",
                "linear 512->256",
                "sphere"
            ]
        );
        assert_eq!(
            dec,
            vec![
                "linear 256->512",
                "gelu",
                "linear 512->1024",
                "gelu",
                "linear 1024->2048",
                "gelu",
                "linear 2048->2048",
                "gelu",
                "linear 2048->3584"
            ]
        );
        assert_eq!((c.lr, c.batch_size, c.epochs), (1e-4, 256, 100));
    }

    #[test]
    fn param_count_matches_built_model() {
        let c = tiny_config(1);
        assert_eq!(AEModel::new(&c).unwrap().param_count(), c.param_count());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(0);
        c.decoder_dims = vec![3, 4, 6];
        assert!(c.validate().is_err());
        let mut c = tiny_config(0);
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(0);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config(0);
        c.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let model = AEModel::new(&tiny_config(7)).unwrap();
        let x = random_batch(6, 5, 1);
        let z = model.encode(&x).unwrap();
        for r in z.row_iter() {
            assert_relative_eq!(r.norm(), 1.0, epsilon = 1e-12);
        }
        let again = AEModel::new(&tiny_config(7)).unwrap().encode(&x).unwrap();
        assert_eq!(z, again);
        assert!(model.encode(&random_batch(6, 4, 1)).is_err());
        assert!(model.decode(&random_batch(6, 5, 1)).is_err());
    }

    #[test]
    fn training_mode_rejects_single_row_batches() {
        let model = AEModel::new(&tiny_config(0)).unwrap();
        assert!(model.encode(&random_batch(1, 5, 0)).is_err());
        let mut frozen = model.clone();
        frozen.set_mode(Mode::Inference);
        assert!(frozen.encode(&random_batch(1, 5, 0)).is_ok());
    }

    #[test]
    fn zero_latent_through_zero_bias_decoder_is_constant() {
        let model = AEModel::new(&tiny_config(3)).unwrap();
        let z = DMatrix::zeros(3, 3);
        let out = model.decode(&z).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = AEModel::new(&tiny_config(11)).unwrap();
        let x = random_batch(4, 5, 2);
        let err = grad_check(&model, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let x = random_batch(3, 4, 5);
        let xh = random_batch(3, 4, 6);
        let w = LossWeights { mse: 0.7, cosine: 1.3 };
        let (_, g) = reconstruction_loss(&x, &xh, w);
        for i in 0..3 {
            for j in 0..4 {
                let mut p = xh.clone();
                let mut m = xh.clone();
                p[(i, j)] += 1e-6;
                m[(i, j)] -= 1e-6;
                let num = (reconstruction_loss(&x, &p, w).0 - reconstruction_loss(&x, &m, w).0) / 2e-6;
                assert_relative_eq!(g[(i, j)], num, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_ends_in_inference_mode() {
        let mut c = tiny_config(4);
        c.epochs = 5;
        let x = random_batch(16, 5, 9);
        let (m1, h1) = train(&c, &x).unwrap();
        let (m2, h2) = train(&c, &x).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(m1.mode, Mode::Inference);
        assert_eq!(h1.len(), 5);
    }

    #[test]
    fn inference_output_independent_of_batch_composition() {
        let mut c = tiny_config(4);
        c.epochs = 3;
        let x = random_batch(16, 5, 9);
        let (m, _) = train(&c, &x).unwrap();
        let full = m.reconstruct(&x).unwrap();
        let part = m.reconstruct(&x.rows(3, 2).into_owned()).unwrap();
        assert_eq!(full.row(3), part.row(0));
        assert_eq!(full.row(4), part.row(1));
    }

    #[test]
    fn untrained_model_is_near_the_mean_predictor() {
        // single inits scatter over roughly ±20%; the seed average is stable
        let ratios: Vec<f64> = (0..20)
            .map(|s| {
                let (c, x) = overfit_fixture(s);
                let mut m = AEModel::new(&c).unwrap();
                m.set_mode(Mode::Inference);
                m.loss(&x).unwrap() / mean_predictor_loss(&x, c.loss_weights)
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "mean ratio {mean}, ratios {ratios:?}");
    }

    #[test]
    fn linear_only_gradients_are_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = vec![Layer::Linear(Linear::init(5, 3, true, &mut rng)), Layer::SphereNormalize];
        let dec = vec![Layer::Linear(Linear::init(3, 5, true, &mut rng))];
        let m = AEModel::from_layers(enc, dec, LossWeights::default()).unwrap();
        let err = grad_check(&m, &random_batch(4, 5, 8), 1e-5).unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }
}
