use crate::checkpoint::TensorArchive;
use crate::config::SessionConfig;
use crate::defender::DefenderNet;
use crate::error::{Error, Result};
use crate::nn::{
    dense_backward, dense_forward, glorot_uniform, logistic_loss, Activation, DenseCache, DenseGrads, DenseParams,
    Mlp, OptimizerState, Tensor,
};
use crate::role::RoleId;
use crate::seed::SeedTree;

/// Feature counts of the two holders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub a: usize,
    pub b: usize,
}

/// Every trainable tensor, grouped by the role that owns it.
///
/// Hidden layers `1..=cut` are evaluated jointly by the holders; the server
/// runs layers `cut+1..=L`. The first layer's weight matrix is stored as the
/// two row blocks `theta_a` / `theta_b`. Joint layers above the first keep
/// their weights at holder A, as do the biases of joint layers below the cut;
/// the cut layer's bias lives at the server, which applies its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPartition {
    pub theta_a: Tensor,
    pub theta_b: Tensor,
    /// Biases of joint layers `1..cut` (empty when `cut == 1`). Holder A.
    pub joint_biases: Vec<Tensor>,
    /// Weights of joint layers `2..=cut`. Holder A.
    pub joint_weights: Vec<Tensor>,
    /// Bias of layer `cut`. Server.
    pub cut_bias: Tensor,
    /// Activations of all hidden layers.
    pub acts: Vec<Activation>,
    /// Layers `cut+1..=L`. Server.
    pub server: Mlp,
    /// Sigmoid output layer. Holder A.
    pub output: DenseParams,
    pub defender_a: Option<Mlp>,
    pub defender_b: Option<Mlp>,
}

/// Defenders exist only when the objective uses them.
pub(crate) fn defender_for(cfg: &SessionConfig, owner: RoleId, dims: FeatureDims) -> Result<Option<DefenderNet>> {
    if cfg.lambda == 0.0 {
        return Ok(None);
    }
    let own = if owner == RoleId::HolderA { dims.a } else { dims.b };
    DefenderNet::new(
        owner,
        cfg.hidden[0],
        own,
        &cfg.defender_hidden,
        cfg.defender_optimizer,
        cfg.defender_lr,
        cfg.defender_mode,
        &SeedTree::new(cfg.seed).child("init").child("defender").child(owner.name()),
    )
    .map(Some)
}

pub(crate) fn optimizer(cfg: &SessionConfig) -> Result<OptimizerState> {
    Ok(OptimizerState::new(cfg.optimizer, cfg.learning_rate)?.with_clip_norm(cfg.clip_norm))
}

fn mlp_entries(a: &mut TensorArchive, prefix: &str, m: &Mlp) {
    for (i, (p, _)) in m.layers.iter().enumerate() {
        a.push(format!("{prefix}/{i}/weights"), p.weights.clone());
        a.push(format!("{prefix}/{i}/bias"), p.bias.clone());
    }
}

fn mlp_from(a: &TensorArchive, prefix: &str, template: &Mlp) -> Result<Mlp> {
    let mut m = template.clone();
    for (i, (p, _)) in m.layers.iter_mut().enumerate() {
        p.weights = take(a, &format!("{prefix}/{i}/weights"), p.weights.shape())?;
        p.bias = take(a, &format!("{prefix}/{i}/bias"), p.bias.shape())?;
    }
    Ok(m)
}

fn take(a: &TensorArchive, name: &str, shape: (usize, usize)) -> Result<Tensor> {
    let t = a.require(name)?;
    if t.shape() != shape {
        return Err(Error::shape(
            "checkpoint",
            format!("`{name}` is {:?}, model expects {shape:?}", t.shape()),
        ));
    }
    Ok(t.clone())
}

impl ModelPartition {
    /// Seeded initialization. The first layer's blocks are drawn with the
    /// Glorot limit of the full `(d_A + d_B) x h1` matrix.
    pub fn init(cfg: &SessionConfig, dims: FeatureDims) -> Result<Self> {
        cfg.validate()?;
        if dims.a == 0 || dims.b == 0 {
            return Err(Error::Config(format!("each holder needs features, got {dims:?}")));
        }
        let seeds = SeedTree::new(cfg.seed).child("init");
        let h = &cfg.hidden;
        let cut = cfg.cut_layer;
        let first = seeds.child_idx("hidden", 0);
        let fan_in = dims.a + dims.b;
        let theta_a = glorot_uniform(dims.a, h[0], fan_in, h[0], &first.child("a"));
        let theta_b = glorot_uniform(dims.b, h[0], fan_in, h[0], &first.child("b"));
        let mut joint_weights = Vec::new();
        let mut server = Vec::new();
        for l in 1..h.len() {
            let p = DenseParams::init(h[l - 1], h[l], &seeds.child_idx("hidden", l as u64));
            if l < cut {
                joint_weights.push(p.weights);
            } else {
                server.push((p, cfg.activations[l]));
            }
        }
        let joint_biases = (0..cut - 1).map(|l| Tensor::zeros(1, h[l])).collect();
        let h_last = *h.last().expect("validated non-empty");
        Ok(ModelPartition {
            theta_a,
            theta_b,
            joint_biases,
            joint_weights,
            cut_bias: Tensor::zeros(1, h[cut - 1]),
            acts: cfg.activations.clone(),
            server: Mlp { layers: server },
            output: DenseParams::init(h_last, 1, &seeds.child("output")),
            defender_a: defender_for(cfg, RoleId::HolderA, dims)?.map(|d| d.net().clone()),
            defender_b: defender_for(cfg, RoleId::HolderB, dims)?.map(|d| d.net().clone()),
        })
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            a: self.theta_a.rows(),
            b: self.theta_b.rows(),
        }
    }

    pub fn cut(&self) -> usize {
        self.joint_weights.len() + 1
    }

    /// Named tensors owned by `role`.
    pub fn role_archive(&self, role: RoleId) -> TensorArchive {
        let mut a = TensorArchive::new();
        match role {
            RoleId::HolderA => {
                a.push("theta_a", self.theta_a.clone());
                for (i, b) in self.joint_biases.iter().enumerate() {
                    a.push(format!("joint/{i}/bias"), b.clone());
                }
                for (i, w) in self.joint_weights.iter().enumerate() {
                    a.push(format!("joint/{i}/weights"), w.clone());
                }
                a.push("output/weights", self.output.weights.clone());
                a.push("output/bias", self.output.bias.clone());
                if let Some(d) = &self.defender_a {
                    mlp_entries(&mut a, "defender_a", d);
                }
            }
            RoleId::HolderB => {
                a.push("theta_b", self.theta_b.clone());
                if let Some(d) = &self.defender_b {
                    mlp_entries(&mut a, "defender_b", d);
                }
            }
            RoleId::Server => {
                a.push("cut_bias", self.cut_bias.clone());
                mlp_entries(&mut a, "server", &self.server);
            }
        }
        a
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut all = TensorArchive::new();
        for role in RoleId::ALL {
            for (n, t) in self.role_archive(role).entries() {
                all.push(n.clone(), t.clone());
            }
        }
        all
    }

    /// Replaces the tensors present in `archive`, checking shapes against `self`.
    pub fn load_role(&mut self, role: RoleId, archive: &TensorArchive) -> Result<()> {
        match role {
            RoleId::HolderA => {
                self.theta_a = take(archive, "theta_a", self.theta_a.shape())?;
                for (i, b) in self.joint_biases.iter_mut().enumerate() {
                    *b = take(archive, &format!("joint/{i}/bias"), b.shape())?;
                }
                for (i, w) in self.joint_weights.iter_mut().enumerate() {
                    *w = take(archive, &format!("joint/{i}/weights"), w.shape())?;
                }
                self.output.weights = take(archive, "output/weights", self.output.weights.shape())?;
                self.output.bias = take(archive, "output/bias", self.output.bias.shape())?;
                if let Some(d) = &self.defender_a {
                    self.defender_a = Some(mlp_from(archive, "defender_a", d)?);
                }
            }
            RoleId::HolderB => {
                self.theta_b = take(archive, "theta_b", self.theta_b.shape())?;
                if let Some(d) = &self.defender_b {
                    self.defender_b = Some(mlp_from(archive, "defender_b", d)?);
                }
            }
            RoleId::Server => {
                self.cut_bias = take(archive, "cut_bias", self.cut_bias.shape())?;
                self.server = mlp_from(archive, "server", &self.server)?;
            }
        }
        Ok(())
    }

    /// Rebuilds a partition for `cfg` from a full checkpoint.
    pub fn from_archive(cfg: &SessionConfig, dims: FeatureDims, archive: &TensorArchive) -> Result<Self> {
        let mut p = Self::init(cfg, dims)?;
        for role in RoleId::ALL {
            p.load_role(role, archive)?;
        }
        Ok(p)
    }

    /// Mutable access to a tensor by its archive name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = |s: &str| s.parse::<usize>().ok();
        let parts: Vec<&str> = name.split('/').collect();
        match parts.as_slice() {
            ["theta_a"] => Some(&mut self.theta_a),
            ["theta_b"] => Some(&mut self.theta_b),
            ["cut_bias"] => Some(&mut self.cut_bias),
            ["output", "weights"] => Some(&mut self.output.weights),
            ["output", "bias"] => Some(&mut self.output.bias),
            ["joint", i, "bias"] => self.joint_biases.get_mut(idx(i)?),
            ["joint", i, "weights"] => self.joint_weights.get_mut(idx(i)?),
            [net, i, field] => {
                let m = match *net {
                    "server" => Some(&mut self.server),
                    "defender_a" => self.defender_a.as_mut(),
                    "defender_b" => self.defender_b.as_mut(),
                    _ => None,
                }?;
                let (p, _) = m.layers.get_mut(idx(i)?)?;
                match *field {
                    "weights" => Some(&mut p.weights),
                    "bias" => Some(&mut p.bias),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    /// Plaintext forward pass through every layer.
    pub fn forward(&self, x_a: &Tensor, x_b: &Tensor) -> Result<Forward> {
        let z1 = x_a.matmul(&self.theta_a)?.add(&x_b.matmul(&self.theta_b)?)?;
        let cut = self.cut();
        let mut joint_out = Vec::with_capacity(cut);
        let mut joint_caches = Vec::with_capacity(cut.saturating_sub(1));
        let first_bias = if cut == 1 { &self.cut_bias } else { &self.joint_biases[0] };
        let mut h = cut_activation(&z1, first_bias, self.acts[0])?;
        joint_out.push(h.clone());
        for l in 1..cut {
            let bias = if l == cut - 1 { &self.cut_bias } else { &self.joint_biases[l] };
            let p = DenseParams {
                weights: self.joint_weights[l - 1].clone(),
                bias: bias.clone(),
            };
            let (out, cache) = dense_forward(&h, &p, self.acts[l])?;
            joint_caches.push((p, cache));
            h = out;
            joint_out.push(h.clone());
        }
        let (h_last, server_cache) = self.server.forward(&h)?;
        let (scores, out_cache) = dense_forward(&h_last, &self.output, Activation::Sigmoid)?;
        Ok(Forward {
            h1: joint_out[0].clone(),
            h_cut: h,
            joint_out,
            joint_caches,
            server_cache,
            out_cache,
            scores,
        })
    }

    pub fn predict(&self, x_a: &Tensor, x_b: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x_a, x_b)?.scores)
    }

    /// `L - λ (d_A + d_B)` on one batch, defenders evaluated as they stand.
    pub fn objective(&self, x_a: &Tensor, x_b: &Tensor, y: &Tensor, lambda: f64) -> Result<f64> {
        let f = self.forward(x_a, x_b)?;
        let loss = logistic_loss(&f.scores, y)?.loss;
        let mut d = 0.0;
        if lambda != 0.0 {
            for (net, x) in [(&self.defender_a, x_a), (&self.defender_b, x_b)] {
                let net = net.as_ref().ok_or_else(|| Error::Config("objective with λ > 0 needs defenders".into()))?;
                d += crate::nn::mse_distance(x, &net.predict(&f.h1)?)?.0;
            }
        }
        Ok(loss - lambda * d)
    }
}

/// `act(z + bias)`, computed the way [`dense_forward`] does after its product.
pub(crate) fn cut_activation(z: &Tensor, bias: &Tensor, act: Activation) -> Result<Tensor> {
    let out = act.forward(&z.add_row(bias)?);
    out.ensure_finite("first hidden layer")?;
    Ok(out)
}

/// `g - λ (D_A + D_B)`; `g` itself when there are no defender terms.
pub(crate) fn with_defender_terms(g: &Tensor, terms: Option<(&Tensor, &Tensor)>, lambda: f64) -> Result<Tensor> {
    match terms {
        None => Ok(g.clone()),
        Some((da, db)) => g.add(&da.add(db)?.scale(-lambda)),
    }
}

pub struct Forward {
    pub h1: Tensor,
    pub h_cut: Tensor,
    joint_out: Vec<Tensor>,
    joint_caches: Vec<(DenseParams, DenseCache)>,
    server_cache: crate::nn::MlpCache,
    out_cache: DenseCache,
    pub scores: Tensor,
}

/// Single-process trainer over the same parameters and arithmetic as the
/// split protocol in its plaintext first-layer mode. Also the plaintext
/// baseline.
pub struct Monolithic {
    pub model: ModelPartition,
    opt_a: OptimizerState,
    opt_b: OptimizerState,
    opt_s: OptimizerState,
    defenders: Option<[DefenderNet; 2]>,
    lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonoStep {
    pub loss: f64,
    pub d_a: Option<f64>,
    pub d_b: Option<f64>,
}

impl Monolithic {
    pub fn new(cfg: &SessionConfig, dims: FeatureDims) -> Result<Self> {
        let model = ModelPartition::init(cfg, dims)?;
        let defenders = match (
            defender_for(cfg, RoleId::HolderA, dims)?,
            defender_for(cfg, RoleId::HolderB, dims)?,
        ) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        };
        Ok(Monolithic {
            model,
            opt_a: optimizer(cfg)?,
            opt_b: optimizer(cfg)?,
            opt_s: optimizer(cfg)?,
            defenders,
            lambda: cfg.lambda,
        })
    }

    /// Gradients of the objective on one batch, named as in the archive. When
    /// defenders are present they take their own step as a side effect.
    pub fn step(&mut self, x_a: &Tensor, x_b: &Tensor, y: &Tensor) -> Result<(MonoStep, Vec<(String, Tensor)>)> {
        let m = &self.model;
        let f = m.forward(x_a, x_b)?;
        let loss = logistic_loss(&f.scores, y)?;
        if !loss.loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let out_g = dense_backward(&loss.grad, &f.out_cache, &m.output)?;
        let (mut g, server_grads) = m.server.backward(&out_g.input, &f.server_cache)?;
        let mut grads: Vec<(String, Tensor)> = Vec::new();

        let cut = m.cut();
        let mut joint_grads: Vec<DenseGrads> = Vec::new();
        for l in (1..cut).rev() {
            let (p, cache) = &f.joint_caches[l - 1];
            let jg = dense_backward(&g, cache, p)?;
            g = jg.input.clone();
            joint_grads.push(jg);
        }
        joint_grads.reverse();

        let mut step = MonoStep {
            loss: loss.loss,
            d_a: None,
            d_b: None,
        };
        let mut terms = None;
        if let Some([da, db]) = self.defenders.as_mut() {
            let sa = da.step(&f.h1, x_a)?;
            let sb = db.step(&f.h1, x_b)?;
            step.d_a = Some(sa.d);
            step.d_b = Some(sb.d);
            for (prefix, s) in [("defender_a", &sa), ("defender_b", &sb)] {
                for (i, lg) in s.param_grads.iter().enumerate() {
                    grads.push((format!("{prefix}/{i}/weights"), lg.weights.scale(-self.lambda)));
                    grads.push((format!("{prefix}/{i}/bias"), lg.bias.scale(-self.lambda)));
                }
            }
            terms = Some((sa.sensitivity, sb.sensitivity));
        }
        let total = with_defender_terms(&g, terms.as_ref().map(|(a, b)| (a, b)), self.lambda)?;
        let delta = m.acts[0].backward(&total, &f.joint_out[0])?;
        let first_bias_grad = delta.col_sums();
        grads.push(("theta_a".into(), x_a.t_matmul(&delta)?));
        grads.push(("theta_b".into(), x_b.t_matmul(&delta)?));
        if cut == 1 {
            grads.push(("cut_bias".into(), first_bias_grad));
        } else {
            grads.push(("joint/0/bias".into(), first_bias_grad));
            for (l, jg) in joint_grads.iter().enumerate() {
                grads.push((format!("joint/{l}/weights"), jg.weights.clone()));
                let name = if l + 2 == cut {
                    "cut_bias".to_string()
                } else {
                    format!("joint/{}/bias", l + 1)
                };
                grads.push((name, jg.bias.clone()));
            }
        }
        for (i, sg) in server_grads.iter().enumerate() {
            grads.push((format!("server/{i}/weights"), sg.weights.clone()));
            grads.push((format!("server/{i}/bias"), sg.bias.clone()));
        }
        grads.push(("output/weights".into(), out_g.weights));
        grads.push(("output/bias".into(), out_g.bias));
        Ok((step, grads))
    }

    /// One training step: gradients, then an optimizer step per owning role.
    pub fn train_step(&mut self, x_a: &Tensor, x_b: &Tensor, y: &Tensor) -> Result<MonoStep> {
        let (step, grads) = self.step(x_a, x_b, y)?;
        for role in RoleId::ALL {
            let mut pairs: Vec<(String, Tensor)> = role_param_names(&self.model, role)
                .into_iter()
                .map(|n| {
                    let g = grads.iter().find(|(gn, _)| *gn == n).map(|(_, g)| g.clone());
                    g.map(|g| (n, g))
                        .ok_or_else(|| Error::Protocol("missing gradient".into()))
                })
                .collect::<Result<_>>()?;
            let opt = match role {
                RoleId::HolderA => &mut self.opt_a,
                RoleId::HolderB => &mut self.opt_b,
                RoleId::Server => &mut self.opt_s,
            };
            step_named(&mut self.model, opt, &mut pairs)?;
        }
        if let Some([da, db]) = &self.defenders {
            self.model.defender_a = Some(da.net().clone());
            self.model.defender_b = Some(db.net().clone());
        }
        Ok(step)
    }
}

/// Names of the tensors a role updates with the main optimizer, in step order.
pub(crate) fn role_param_names(model: &ModelPartition, role: RoleId) -> Vec<String> {
    model
        .role_archive(role)
        .entries()
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !n.starts_with("defender"))
        .collect()
}

/// Applies one optimizer step to the named tensors of `model`.
pub(crate) fn step_named(model: &mut ModelPartition, opt: &mut OptimizerState, grads: &mut [(String, Tensor)]) -> Result<()> {
    let mut params: Vec<Tensor> = grads
        .iter()
        .map(|(n, _)| model.param_mut(n).map(|t| t.clone()).ok_or_else(|| Error::Protocol(format!("no parameter {n}"))))
        .collect::<Result<_>>()?;
    {
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        let g: Vec<&Tensor> = grads.iter().map(|(_, g)| g).collect();
        opt.step(&mut refs, &g)?;
    }
    for ((n, _), p) in grads.iter().zip(params) {
        *model.param_mut(n).expect("checked above") = p;
    }
    Ok(())
}
