use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::seed::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output `h = act(z)`.
    pub fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Sigmoid => h * (1.0 - h),
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }

    pub fn forward(self, z: &Tensor) -> Tensor {
        z.map(|v| self.apply(v))
    }

    /// `grad ⊙ act'(z)` given the activation output.
    pub fn backward(self, grad: &Tensor, output: &Tensor) -> Result<Tensor> {
        if grad.shape() != output.shape() {
            return Err(Error::shape(
                "Activation::backward",
                format!("{:?} vs {:?}", grad.shape(), output.shape()),
            ));
        }
        let data = grad
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &h)| g * self.derivative_from_output(h))
            .collect();
        Tensor::from_vec(grad.rows(), grad.cols(), data)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "linear" | "identity" => Ok(Activation::Linear),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "layer dims must be positive, got {in_dim}x{out_dim}"
            )));
        }
        Ok(LayerSpec {
            in_dim,
            out_dim,
            activation,
        })
    }
}

/// Weights (`in x out`) and bias (`1 x out`) of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseParams {
            weights: Tensor::zeros(in_dim, out_dim),
            bias: Tensor::zeros(1, out_dim),
        }
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, seeds: &SeedTree) -> Self {
        DenseParams {
            weights: glorot_uniform(in_dim, out_dim, in_dim, out_dim, seeds),
            bias: Tensor::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    fn check(&self) -> Result<()> {
        if self.bias.shape() != (1, self.weights.cols()) {
            return Err(Error::shape(
                "DenseParams",
                format!(
                    "bias {:?} for weights {:?}",
                    self.bias.shape(),
                    self.weights.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Glorot-uniform block of a `fan_in x fan_out` weight matrix. Blocks of the
/// same matrix drawn from different seeds share the limit of the full matrix.
pub fn glorot_uniform(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    seeds: &SeedTree,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = seeds.rng();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("finite init")
}

/// What `dense_backward` needs from the forward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    pub input: Tensor,
    pub output: Tensor,
    pub activation: Activation,
}

pub fn dense_forward(x: &Tensor, p: &DenseParams, act: Activation) -> Result<(Tensor, DenseCache)> {
    p.check()?;
    if x.cols() != p.in_dim() {
        return Err(Error::shape(
            "dense_forward",
            format!("input {:?} into layer {:?}", x.shape(), p.weights.shape()),
        ));
    }
    let z = x.matmul(&p.weights)?.add_row(&p.bias)?;
    let out = act.forward(&z);
    out.ensure_finite("dense_forward")?;
    let cache = DenseCache {
        input: x.clone(),
        output: out.clone(),
        activation: act,
    };
    Ok((out, cache))
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(grad_out: &Tensor, cache: &DenseCache, p: &DenseParams) -> Result<DenseGrads> {
    if grad_out.shape() != cache.output.shape() {
        return Err(Error::shape(
            "dense_backward",
            format!(
                "gradient {:?} for output {:?}",
                grad_out.shape(),
                cache.output.shape()
            ),
        ));
    }
    let dz = cache.activation.backward(grad_out, &cache.output)?;
    Ok(DenseGrads {
        input: dz.matmul_t(&p.weights)?,
        weights: cache.input.t_matmul(&dz)?,
        bias: dz.col_sums(),
    })
}
