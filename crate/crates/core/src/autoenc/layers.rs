//! Layers with explicit forward caches and hand-written backward passes.
//! Batches are `B×D` matrices, one sample per row.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit));
        Self {
            weight,
            bias: bias.then(|| DVector::zeros(fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: DVector::from_element(dim, 1.0),
            beta: DVector::zeros(dim),
            running_mean: DVector::zeros(dim),
            running_var: DVector::from_element(dim, 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    BatchNorm(BatchNorm),
    Gelu,
    SphereNormalize,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Linear { input: DMatrix<f64> },
    BatchNorm {
        x_hat: DMatrix<f64>,
        inv_std: RowDVector<f64>,
        mean: RowDVector<f64>,
        var: RowDVector<f64>,
    },
    BatchNormFrozen { inv_std: RowDVector<f64> },
    Gelu { input: DMatrix<f64> },
    Sphere { output: DMatrix<f64>, norms: DVector<f64> },
}

/// Parameter gradients of one layer, laid out like [`Layer::params`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerGrad(pub Vec<Vec<f64>>);

fn row_to_vec(r: &RowDVector<f64>) -> Vec<f64> {
    r.iter().copied().collect()
}

fn inv_sqrt_2pi() -> f64 {
    1.0 / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GeLU `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * inv_sqrt_2pi() * (-0.5 * x * x).exp()
}

/// Row-wise `v / ‖v‖`.
pub fn sphere_normalize(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Jacobian of `v / ‖v‖`: `I/‖v‖ − v·vᵀ/‖v‖³`.
pub fn sphere_normalize_jacobian(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.norm();
    DMatrix::identity(v.len(), v.len()) / n - v * v.transpose() / (n * n * n)
}

impl Layer {
    pub fn in_dim(&self) -> Option<usize> {
        match self {
            Layer::Linear(l) => Some(l.in_dim()),
            Layer::BatchNorm(b) => Some(b.dim()),
            _ => None,
        }
    }

    pub fn out_dim(&self) -> Option<usize> {
        match self {
            Layer::Linear(l) => Some(l.out_dim()),
            Layer::BatchNorm(b) => Some(b.dim()),
            _ => None,
        }
    }

    /// Trainable parameter blocks. Linear weights are exposed in nalgebra's
    /// column-major storage order.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Linear(l) => {
                let mut v = vec![l.weight.as_slice()];
                if let Some(b) = &l.bias {
                    v.push(b.as_slice());
                }
                v
            }
            Layer::BatchNorm(b) => vec![b.gamma.as_slice(), b.beta.as_slice()],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Linear(l) => {
                let mut v = vec![l.weight.as_mut_slice()];
                if let Some(b) = &mut l.bias {
                    v.push(b.as_mut_slice());
                }
                v
            }
            Layer::BatchNorm(b) => vec![b.gamma.as_mut_slice(), b.beta.as_mut_slice()],
            _ => Vec::new(),
        }
    }

    /// Forward pass. Training-mode batch norm normalises with the batch
    /// statistics and records them in the cache; see [`Layer::update_running`].
    pub(crate) fn forward(&self, x: &DMatrix<f64>, mode: Mode) -> Result<(DMatrix<f64>, Cache)> {
        if let Some(d) = self.in_dim() {
            if x.ncols() != d {
                return Err(Error::dim("layer input width", d, x.ncols()));
            }
        }
        Ok(match self {
            Layer::Linear(l) => {
                let mut y = x * l.weight.transpose();
                if let Some(b) = &l.bias {
                    for mut row in y.row_iter_mut() {
                        row += b.transpose();
                    }
                }
                (y, Cache::Linear { input: x.clone() })
            }
            Layer::BatchNorm(bn) => match mode {
                Mode::Training => {
                    let m = x.nrows();
                    if m < 2 {
                        return Err(Error::InvalidArgument("batch norm in training mode needs a batch of at least 2".into()));
                    }
                    let mean = x.row_mean();
                    let mut centered = x.clone();
                    for mut row in centered.row_iter_mut() {
                        row -= &mean;
                    }
                    let var = centered.map(|v| v * v).row_mean();
                    let inv_std = var.map(|v| 1.0 / (v + bn.eps).sqrt());
                    let mut x_hat = centered;
                    for mut row in x_hat.row_iter_mut() {
                        row.component_mul_assign(&inv_std);
                    }
                    let y = affine(&x_hat, &bn.gamma, &bn.beta);
                    (y, Cache::BatchNorm { x_hat, inv_std, mean, var })
                }
                Mode::Inference => {
                    let inv_std = RowDVector::from_iterator(bn.dim(), bn.running_var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()));
                    let mut x_hat = x.clone();
                    for mut row in x_hat.row_iter_mut() {
                        row -= bn.running_mean.transpose();
                        row.component_mul_assign(&inv_std);
                    }
                    (affine(&x_hat, &bn.gamma, &bn.beta), Cache::BatchNormFrozen { inv_std })
                }
            },
            Layer::Gelu => (x.map(gelu), Cache::Gelu { input: x.clone() }),
            Layer::SphereNormalize => {
                let norms = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.norm()));
                let y = sphere_normalize(x);
                (y.clone(), Cache::Sphere { output: y, norms })
            }
        })
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running estimates (unbiased variance, exponential moving average).
    pub(crate) fn update_running(&mut self, cache: &Cache) {
        if let (Layer::BatchNorm(bn), Cache::BatchNorm { x_hat, mean, var, .. }) = (self, cache) {
            let m = x_hat.nrows() as f64;
            let unbiased = m / (m - 1.0);
            for j in 0..bn.dim() {
                bn.running_mean[j] = (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean[j];
                bn.running_var[j] = (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * var[j] * unbiased;
            }
        }
    }

    /// Backward pass: returns the input gradient and the parameter
    /// gradients.
    pub(crate) fn backward(&self, cache: &Cache, dy: &DMatrix<f64>) -> (DMatrix<f64>, LayerGrad) {
        match (self, cache) {
            (Layer::Linear(l), Cache::Linear { input }) => {
                let dw = dy.transpose() * input;
                let mut grads = vec![dw.as_slice().to_vec()];
                if l.bias.is_some() {
                    grads.push(row_to_vec(&dy.row_sum()));
                }
                (dy * &l.weight, LayerGrad(grads))
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm { x_hat, inv_std, .. }) => {
                let m = dy.nrows() as f64;
                let dbeta = dy.row_sum();
                let dgamma = dy.component_mul(x_hat).row_sum();
                let gamma = bn.gamma.transpose();
                let mut dx = DMatrix::zeros(dy.nrows(), dy.ncols());
                for j in 0..dy.ncols() {
                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                    let k = gamma[j] * inv_std[j];
                    let mean_dy = dbeta[j] / m;
                    let mean_dyx = dgamma[j] / m;
                    for i in 0..dy.nrows() {
                        dx[(i, j)] = k * (dy[(i, j)] - mean_dy - x_hat[(i, j)] * mean_dyx);
                    }
                }
                (dx, LayerGrad(vec![row_to_vec(&dgamma), row_to_vec(&dbeta)]))
            }
            (Layer::BatchNorm(bn), Cache::BatchNormFrozen { inv_std }) => {
                let mut dx = dy.clone();
                for mut row in dx.row_iter_mut() {
                    row.component_mul_assign(inv_std);
                    row.component_mul_assign(&bn.gamma.transpose());
                }
                // only the input gradient is meaningful with frozen statistics
                (dx, LayerGrad(vec![vec![0.0; bn.dim()], vec![0.0; bn.dim()]]))
            }
            (Layer::Gelu, Cache::Gelu { input }) => (dy.component_mul(&input.map(gelu_grad)), LayerGrad(Vec::new())),
            (Layer::SphereNormalize, Cache::Sphere { output, norms }) => {
                let mut dx = dy.clone();
                for i in 0..dy.nrows() {
                    let y = output.row(i);
                    let proj = y.dot(&dy.row(i));
                    let n = norms[i];
                    let mut r = dx.row_mut(i);
                    r -= y * proj;
                    if n > 0.0 {
                        r /= n;
                    }
                }
                (dx, LayerGrad(Vec::new()))
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}

fn affine(x_hat: &DMatrix<f64>, gamma: &DVector<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let mut y = x_hat.clone();
    for mut row in y.row_iter_mut() {
        row.component_mul_assign(&gamma.transpose());
        row += beta.transpose();
    }
    y
}
