//! Fully connected vector-field regressor with analytic gradients.
//!
//! Input layout: `[z, z_ref, z_cond, embed(t), embed(gap)]`, so the input
//! width is `3p + 2 * embed_dim`. Output width is `p`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Softplus,
    /// Tanh approximation of GELU.
    Gelu,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Softplus, Activation::Gelu, Activation::Tanh];

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Gelu => {
                let inner = GELU_K * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Gelu => {
                let inner = GELU_K * (x + GELU_C * x * x * x);
                let th = inner.tanh();
                0.5 * (1.0 + th)
                    + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Tanh => {
                let th = x.tanh();
                1.0 - th * th
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Fixed sinusoidal features `sin(scale x / base^{k/half}), cos(...)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base: f64,
    pub scale: f64,
}

impl TimeEmbedding {
    pub fn flow_time(dim: usize) -> Self {
        Self {
            dim,
            base: 100.0,
            scale: 16.0,
        }
    }

    /// Slow enough that neighbouring gaps get similar features.
    pub fn gap(dim: usize) -> Self {
        Self {
            dim,
            base: 100.0,
            scale: 0.1,
        }
    }

    pub fn embed_into(&self, x: f64, out: &mut [f64]) {
        let half = self.dim / 2;
        for k in 0..half {
            let freq = self.scale / self.base.powf(k as f64 / half as f64);
            let (s, c) = (x * freq).sin_cos();
            out[k] = s;
            out[half + k] = c;
        }
    }

    pub fn embed(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.embed_into(x, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub width: usize,
    /// Number of hidden layers; 0 gives a single affine map.
    pub depth: usize,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
    pub gap_embedding: TimeEmbedding,
}

impl ModelConfig {
    pub fn new(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            width: 128,
            depth: 3,
            activation: Activation::Softplus,
            time_embedding: TimeEmbedding::flow_time(16),
            gap_embedding: TimeEmbedding::gap(16),
        }
    }

    pub fn input_width(&self) -> usize {
        3 * self.latent_dim + self.time_embedding.dim + self.gap_embedding.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::param("latent_dim", "must be >= 1"));
        }
        if self.depth > 0 && self.width == 0 {
            return Err(Error::param("width", "must be >= 1"));
        }
        for (name, e) in [
            ("time_embedding.dim", self.time_embedding),
            ("gap_embedding.dim", self.gap_embedding),
        ] {
            if e.dim % 2 != 0 {
                return Err(Error::param(name, "must be even"));
            }
            if !(e.base > 0.0 && e.scale.is_finite()) {
                return Err(Error::param(name, "base must be > 0"));
            }
        }
        Ok(())
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(std::iter::repeat_n(self.width, self.depth));
        sizes.push(self.latent_dim);
        sizes
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Any conditional vector field `v_t(z | z_ref, z_cond, gap)` the sampler can integrate.
pub trait ConditionalField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, z: &[f64], z_ref: &[f64], z_cond: &[f64], gap: usize, t: f64)
        -> Result<Vec<f64>>;
}

/// One training example for [`VectorFieldModel::loss_and_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub z: Vec<f64>,
    pub z_ref: Vec<f64>,
    pub z_cond: Vec<f64>,
    pub gap: usize,
    pub t: f64,
    pub target: Vec<f64>,
    /// Loss weight for this example (1 for the flow loss).
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldModel {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl VectorFieldModel {
    /// All-zero parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let sizes = config.layer_sizes();
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut offset = 0;
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layers.push(Layer {
                fan_in,
                fan_out,
                w: offset,
                b: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            config,
            layers,
            params: vec![0.0; offset],
        })
    }

    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut r = rng::seeded(seed);
        for layer in m.layers.clone() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            let end = layer.b + layer.fan_out;
            for p in &mut m.params[layer.w..end] {
                *p = bound * (2.0 * r.random::<f64>() - 1.0);
            }
        }
        Ok(m)
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        if params.len() != m.params.len() {
            return Err(Error::DimensionMismatch {
                expected: m.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(weights offset, bias offset, fan_in, fan_out)` per layer, weights row-major `out x in`.
    pub fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.w, l.b, l.fan_in, l.fan_out))
            .collect()
    }

    fn assemble_input(
        &self,
        z: &[f64],
        z_ref: &[f64],
        z_cond: &[f64],
        gap: usize,
        t: f64,
    ) -> Result<Vec<f64>> {
        let p = self.config.latent_dim;
        for v in [z, z_ref, z_cond] {
            if v.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: v.len(),
                });
            }
        }
        let mut x = Vec::with_capacity(self.config.input_width());
        x.extend_from_slice(z);
        x.extend_from_slice(z_ref);
        x.extend_from_slice(z_cond);
        x.extend(self.config.time_embedding.embed(t));
        x.extend(self.config.gap_embedding.embed(gap as f64));
        Ok(x)
    }

    /// Returns the pre-activations of every layer (the last one is the output).
    fn run(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let act = self.config.activation;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h: Vec<f64> = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = &self.params[layer.w..layer.b];
            let b = &self.params[layer.b..layer.b + layer.fan_out];
            let y: Vec<f64> = (0..layer.fan_out)
                .map(|o| {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    b[o] + row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect();
            if i + 1 < self.layers.len() {
                h = y.iter().map(|&v| act.apply(v)).collect();
            }
            pre.push(y);
        }
        pre
    }

    pub fn forward(
        &self,
        z: &[f64],
        z_ref: &[f64],
        z_cond: &[f64],
        gap: usize,
        t: f64,
    ) -> Result<Vec<f64>> {
        let input = self.assemble_input(z, z_ref, z_cond, gap, t)?;
        Ok(self.run(&input).pop().unwrap_or_default())
    }

    /// Squared residual of one example and its gradient, both scaled by `scale`.
    fn example_grad(&self, ex: &Example, scale: f64) -> Result<(f64, Vec<f64>)> {
        let input = self.assemble_input(&ex.z, &ex.z_ref, &ex.z_cond, ex.gap, ex.t)?;
        if ex.target.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.latent_dim,
                got: ex.target.len(),
            });
        }
        let act = self.config.activation;
        let pre = self.run(&input);
        let out = pre.last().expect("at least one layer");
        let mut loss = 0.0;
        let mut delta: Vec<f64> = out
            .iter()
            .zip(&ex.target)
            .map(|(y, target)| {
                let r = y - target;
                loss += r * r;
                2.0 * scale * ex.weight * r
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        for i in (0..self.layers.len()).rev() {
            let layer = self.layers[i];
            let below: Vec<f64> = if i == 0 {
                input.clone()
            } else {
                pre[i - 1].iter().map(|&v| act.apply(v)).collect()
            };
            for o in 0..layer.fan_out {
                let d = delta[o];
                grad[layer.b + o] = d;
                let row = &mut grad[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                for (g, x) in row.iter_mut().zip(&below) {
                    *g = d * x;
                }
            }
            if i > 0 {
                let w = &self.params[layer.w..layer.b];
                delta = (0..layer.fan_in)
                    .map(|j| {
                        let back: f64 = (0..layer.fan_out)
                            .map(|o| w[o * layer.fan_in + j] * delta[o])
                            .sum();
                        back * act.derivative(pre[i - 1][j])
                    })
                    .collect();
            }
        }
        Ok((scale * ex.weight * loss, grad))
    }

    /// Mean weighted squared L2 residual over `batch` and its exact gradient.
    ///
    /// Per-example gradients may be computed in parallel; they are summed in
    /// batch order so the result does not depend on the thread count.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if batch
            .iter()
            .any(|ex| ex.target.iter().any(|v| !v.is_finite()) || !ex.weight.is_finite())
        {
            return Err(Error::NonFinite("regression target"));
        }
        let scale = 1.0 / batch.len() as f64;
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|ex| self.example_grad(ex, scale))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.params.len()];
        for (l, g) in parts {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        Ok((loss, grad))
    }

    /// Loss only, for finite-difference checks and evaluation.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in batch {
            let y = self.forward(&ex.z, &ex.z_ref, &ex.z_cond, ex.gap, ex.t)?;
            total += ex.weight
                * y.iter()
                    .zip(&ex.target)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
        }
        Ok(total / batch.len() as f64)
    }
}

impl ConditionalField for VectorFieldModel {
    fn dim(&self) -> usize {
        self.config.latent_dim
    }

    fn eval(
        &self,
        z: &[f64],
        z_ref: &[f64],
        z_cond: &[f64],
        gap: usize,
        t: f64,
    ) -> Result<Vec<f64>> {
        self.forward(z, z_ref, z_cond, gap, t)
    }
}
