use std::fmt;
use std::str::FromStr;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" | "gd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one parameter group. Moments are created on the first
/// step and must keep the same shapes afterwards.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    clip_norm: Option<f64>,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            clip_norm: None,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    /// Rescales the whole gradient set when its global L2 norm exceeds `max_norm`.
    pub fn with_clip_norm(mut self, max_norm: Option<f64>) -> Self {
        self.clip_norm = max_norm;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.learning_rate * scale;
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
                    self.second = self.first.clone();
                } else if self.first.len() != grads.len()
                    || self.first.iter().zip(grads).any(|(m, g)| m.shape() != g.shape())
                {
                    return Err(Error::shape(
                        "optimizer_step",
                        "gradient shapes changed between Adam steps",
                    ));
                }
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    for (((w, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let d = d * scale;
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * d;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * d * d;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = OptimizerState::new(kind, 0.1).unwrap();
            let mut p = Tensor::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
            let before = p.clone();
            opt.step(&mut [&mut p], &[&Tensor::zeros(1, 2)]).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn sgd_step() {
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        let mut p = Tensor::filled(1, 1, 1.0);
        opt.step(&mut [&mut p], &[&Tensor::filled(1, 1, 0.5)]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_matches_reference() {
        let lr = 0.01;
        let mut opt = OptimizerState::adam(lr).unwrap();
        let mut p = Tensor::zeros(1, 1);
        opt.step(&mut [&mut p], &[&Tensor::filled(1, 1, 1.0)]).unwrap();
        // m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1.
        let m_hat = (0.1) / (1.0 - 0.9);
        let v_hat = (0.001) / (1.0 - 0.999);
        let expected = -lr * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert!((p.data()[0] + lr).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        let mut p = Tensor::zeros(1, 2);
        assert!(opt.step(&mut [&mut p], &[&Tensor::zeros(2, 1)]).is_err());
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }

    #[test]
    fn clipping_caps_update() {
        let mut opt = OptimizerState::sgd(1.0).unwrap().with_clip_norm(Some(5.0));
        let mut p = Tensor::zeros(1, 2);
        opt.step(&mut [&mut p], &[&Tensor::from_vec(1, 2, vec![30.0, 40.0]).unwrap()]).unwrap();
        assert!((p.data()[0] + 3.0).abs() < 1e-12 && (p.data()[1] + 4.0).abs() < 1e-12);
    }
}
