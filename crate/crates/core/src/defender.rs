//! Defender networks and the reconstruction-attack harness.
//!
//! A defender lives at a data holder and tries to rebuild that holder's
//! features from the exposed first hidden layer `h1`. Its reconstruction
//! error `d` enters the training objective as `L - λ (d_A + d_B)`, so the
//! main model is pushed toward hidden representations that reconstruct badly.

use rand::seq::SliceRandom;

use crate::checkpoint::TensorArchive;
use crate::config::DefenderMode;
use crate::error::{Error, Result};
use crate::nn::{flatten_grads, mse_distance, Activation, DenseGrads, Mlp, OptimizerKind, OptimizerState, Tensor};
use crate::role::RoleId;
use crate::seed::SeedTree;

/// Relu hidden layers, linear output, mapping `in_dim` to `out_dim`.
fn reconstruction_net(in_dim: usize, widths: &[usize], out_dim: usize, seeds: &SeedTree) -> Result<Mlp> {
    let mut dims = vec![in_dim];
    dims.extend_from_slice(widths);
    dims.push(out_dim);
    let mut acts = vec![Activation::Relu; widths.len()];
    acts.push(Activation::Linear);
    Mlp::init(&dims, &acts, seeds)
}

#[derive(Debug, Clone)]
pub struct DefenderNet {
    owner: RoleId,
    net: Mlp,
    opt: OptimizerState,
    mode: DefenderMode,
}

/// Result of one defender update, evaluated before the parameters moved.
#[derive(Debug, Clone)]
pub struct DefenderStep {
    pub d: f64,
    /// `∂d/∂h1`.
    pub sensitivity: Tensor,
    /// `∂d/∂θ_d`, in [`Mlp::params`] order.
    pub param_grads: Vec<DenseGrads>,
}

impl DefenderStep {
    /// The defender's contribution to the objective's gradient at `h1`: `-λ ∂d/∂h1`.
    pub fn grad_h1_term(&self, lambda: f64) -> Tensor {
        self.sensitivity.scale(-lambda)
    }
}

impl DefenderNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        owner: RoleId,
        hidden_dim: usize,
        feature_dim: usize,
        widths: &[usize],
        optimizer: OptimizerKind,
        learning_rate: f64,
        mode: DefenderMode,
        seeds: &SeedTree,
    ) -> Result<Self> {
        if !owner.is_holder() {
            return Err(Error::Config(format!("defenders live at data holders, not {owner}")));
        }
        Ok(DefenderNet {
            owner,
            net: reconstruction_net(hidden_dim, widths, feature_dim, seeds)?,
            opt: OptimizerState::new(optimizer, learning_rate)?,
            mode,
        })
    }

    pub fn owner(&self) -> RoleId {
        self.owner
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn check(&self, h1: &Tensor, x_own: &Tensor) -> Result<()> {
        let (i, o) = (self.net.in_dim().unwrap_or(0), self.net.out_dim().unwrap_or(0));
        if h1.cols() != i || x_own.cols() != o || h1.rows() != x_own.rows() {
            return Err(Error::shape(
                "defender",
                format!(
                    "net {i}->{o} given h1 {:?} and features {:?}",
                    h1.shape(),
                    x_own.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn evaluate(&self, h1: &Tensor, x_own: &Tensor) -> Result<DefenderStep> {
        self.check(h1, x_own)?;
        let (recon, cache) = self.net.forward(h1)?;
        let (d, grad) = mse_distance(x_own, &recon)?;
        let (sensitivity, param_grads) = self.net.backward(&grad, &cache)?;
        Ok(DefenderStep {
            d,
            sensitivity,
            param_grads,
        })
    }

    /// Evaluates at the current parameters, then takes one optimizer step:
    /// down on `d` in attacker mode, up on `d` in literal mode.
    pub fn step(&mut self, h1: &Tensor, x_own: &Tensor) -> Result<DefenderStep> {
        let out = self.evaluate(h1, x_own)?;
        let flat = flatten_grads(&out.param_grads);
        match self.mode {
            DefenderMode::Attacker => self.opt.step(&mut self.net.params_mut(), &flat)?,
            DefenderMode::Literal => {
                let neg: Vec<Tensor> = flat.iter().map(|g| g.scale(-1.0)).collect();
                let refs: Vec<&Tensor> = neg.iter().collect();
                self.opt.step(&mut self.net.params_mut(), &refs)?;
            }
        }
        Ok(out)
    }
}

/// One defender update; returns `d` and `-λ ∂d/∂h1` at the pre-update parameters.
pub fn defender_step(h1: &Tensor, x_own: &Tensor, net: &mut DefenderNet, lambda: f64) -> Result<(f64, Tensor)> {
    let s = net.step(h1, x_own)?;
    Ok((s.d, s.grad_h1_term(lambda)))
}

pub const MIN_LEAKED_PAIRS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            widths: vec![512, 128],
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Server-side reconstruction network trained on leaked `(h1, X)` pairs.
#[derive(Debug, Clone)]
pub struct AttackerNet {
    pub net: Mlp,
    /// Mean reconstruction error on the leaked pairs after the last epoch.
    pub train_mse: f64,
}

pub fn train_attacker(hidden: &Tensor, features: &Tensor, cfg: &AttackConfig) -> Result<AttackerNet> {
    let n = hidden.rows();
    if n != features.rows() {
        return Err(Error::shape(
            "train_attacker",
            format!("{n} hidden rows for {} feature rows", features.rows()),
        ));
    }
    if n < MIN_LEAKED_PAIRS {
        return Err(Error::Config(format!(
            "attacker needs at least {MIN_LEAKED_PAIRS} leaked pairs, got {n}"
        )));
    }
    let seeds = SeedTree::new(cfg.seed).child("attacker");
    let mut net = reconstruction_net(hidden.cols(), &cfg.widths, features.cols(), &seeds.child("init"))?;
    let mut opt = OptimizerState::adam(cfg.learning_rate)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_mse = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeds.child_idx("shuffle", epoch as u64).rng());
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let h = hidden.select_rows(chunk);
            let x = features.select_rows(chunk);
            let (recon, cache) = net.forward(&h)?;
            let (d, grad) = mse_distance(&x, &recon)?;
            total += d * chunk.len() as f64;
            let (_, grads) = net.backward(&grad, &cache)?;
            opt.step(&mut net.params_mut(), &flatten_grads(&grads))?;
        }
        train_mse = total / n as f64;
    }
    Ok(AttackerNet { net, train_mse })
}

#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub per_record_mse: Vec<f64>,
    pub reconstructions: Tensor,
    pub originals: Tensor,
}

impl RecoveryReport {
    pub fn mean_mse(&self) -> f64 {
        self.per_record_mse.iter().sum::<f64>() / self.per_record_mse.len().max(1) as f64
    }

    /// One `orig/<i>` and one `recon/<i>` row tensor per record.
    pub fn dump(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for i in 0..self.originals.rows() {
            a.push(format!("orig/{i}"), self.originals.slice_rows(i, i + 1));
            a.push(format!("recon/{i}"), self.reconstructions.slice_rows(i, i + 1));
        }
        a
    }
}

pub fn recovery_report(attacker: &AttackerNet, hidden: &Tensor, features: &Tensor) -> Result<RecoveryReport> {
    let recon = attacker.net.predict(hidden)?;
    if recon.shape() != features.shape() {
        return Err(Error::shape(
            "recovery_report",
            format!("reconstruction {:?} vs features {:?}", recon.shape(), features.shape()),
        ));
    }
    let d = features.cols() as f64;
    let per_record_mse = (0..features.rows())
        .map(|i| {
            recon
                .row(i)
                .iter()
                .zip(features.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / d
        })
        .collect();
    Ok(RecoveryReport {
        per_record_mse,
        reconstructions: recon,
        originals: features.clone(),
    })
}
