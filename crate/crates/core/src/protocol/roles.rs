//! The three role loops. Each runs single-threaded over its own [`Mesh`] and
//! walks the same [`Schedule`]; all coordination is by blocking messages.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::model::{cut_activation, defender_for, optimizer, role_param_names, step_named, with_defender_terms};
use super::{FeatureDims, ModelPartition, Schedule, TraceRecord, TrainStep, TrainingTrace};
use crate::checkpoint::TensorArchive;
use crate::config::{FirstLayerMode, SessionConfig};
use crate::defender::DefenderNet;
use crate::error::{Error, Result};
use crate::nn::{dense_backward, dense_forward, logistic_loss, Activation, OptimizerState, Tensor};
use crate::ring::{FxConfig, FxMatrix};
use crate::role::RoleId;
use crate::seed::SeedTree;
use crate::share::{MpcParty, TripleProvider};
use crate::transport::{LinkStats, Mesh, MessageKind};

/// A holder's private columns for both folds; labels only at holder A.
#[derive(Debug, Clone, PartialEq)]
pub struct HolderInput {
    pub train: Tensor,
    pub test: Tensor,
    pub labels: Option<Labels>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub train: Tensor,
    pub test: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// The role stops and drops its connections without an abort frame.
    Crash,
    /// The role stalls for the given time, then exits silently.
    Hang(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPhase {
    StepStart,
    /// After the role's forward-pass sends of the step.
    AfterForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPlan {
    pub role: RoleId,
    pub iteration: usize,
    pub kind: FaultKind,
    pub phase: FaultPhase,
}

/// Test and benchmark hooks; the defaults run a plain session.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many training steps.
    pub max_steps: Option<usize>,
    pub skip_final_eval: bool,
    /// Keep the named gradients of the most recent step in the report.
    pub record_grads: bool,
    pub fault: Option<FaultPlan>,
    /// Set to the moment an injected fault fires.
    pub fault_clock: Option<Arc<Mutex<Option<Instant>>>>,
}

/// Everything one role needs besides its mesh.
pub struct RoleSetup {
    pub cfg: SessionConfig,
    /// Holders only.
    pub input: Option<HolderInput>,
    /// Holders in secure mode.
    pub provider: Option<Box<dyn TripleProvider>>,
    /// This role's private randomness (share masks).
    pub masks: SeedTree,
    /// Recorded in the trace header by holder A.
    pub dataset_fingerprint: String,
    /// Parameters to start from instead of the seeded init (this role's tensors).
    pub params: Option<TensorArchive>,
    pub options: RunOptions,
}

#[derive(Debug, Clone, Default)]
pub struct RoleOutput {
    /// Holder A.
    pub trace: Option<TrainingTrace>,
    /// Holder A, final evaluation over the training fold.
    pub train_scores: Option<Tensor>,
    /// Holder A, final evaluation over the test fold.
    pub test_scores: Option<Tensor>,
    /// Server: reconstructed first-layer entries beyond the fixed-point bound.
    pub anomalies: u64,
    pub triples_used: usize,
}

pub struct RoleReport {
    pub role: RoleId,
    pub result: Result<RoleOutput>,
    /// The role's parameters when it stopped. Updates happen only after a
    /// step's messages complete, so after an abort these are the last good ones.
    pub params: TensorArchive,
    pub grads: Vec<(String, Tensor)>,
    pub stats: LinkStats,
    pub finished: Instant,
    /// Set when the role stopped because of an injected fault.
    pub injected: bool,
}

struct Injected;

/// Role-local error: either a real failure or an injected fault.
enum Stop {
    Err(Error),
    Fault(Injected),
}

impl From<Error> for Stop {
    fn from(e: Error) -> Self {
        Stop::Err(e)
    }
}

type StepResult<T> = std::result::Result<T, Stop>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PeerInfo {
    n_train: usize,
    n_test: usize,
    features: usize,
}

fn holder_info(input: &HolderInput) -> String {
    format!(
        "n_train={} n_test={} features={}",
        input.train.rows(),
        input.test.rows(),
        input.train.cols()
    )
}

fn parse_info(role: RoleId, s: &str) -> Result<PeerInfo> {
    let mut v = [None; 3];
    for kv in s.split_whitespace() {
        let (k, val) = kv.split_once('=').unwrap_or((kv, ""));
        let slot = match k {
            "n_train" => 0,
            "n_test" => 1,
            "features" => 2,
            _ => continue,
        };
        v[slot] = val.parse::<usize>().ok();
    }
    match v {
        [Some(n_train), Some(n_test), Some(features)] => Ok(PeerInfo {
            n_train,
            n_test,
            features,
        }),
        _ => Err(Error::Protocol(format!("{role} sent malformed session info `{s}`"))),
    }
}

/// State shared by all three role loops.
struct Ctx {
    cfg: SessionConfig,
    fx: FxConfig,
    role: RoleId,
    mesh: Mesh,
    model: ModelPartition,
    opt: OptimizerState,
    schedule: Schedule,
    options: RunOptions,
    grads: Vec<(String, Tensor)>,
    secure: bool,
}

impl Ctx {
    fn fault_due(&self, iteration: usize, phase: FaultPhase) -> Option<FaultKind> {
        self.options
            .fault
            .filter(|f| f.role == self.role && f.iteration == iteration && f.phase == phase)
            .map(|f| f.kind)
    }

    fn maybe_fault(&self, iteration: usize, phase: FaultPhase) -> StepResult<()> {
        if let Some(kind) = self.fault_due(iteration, phase) {
            if let Some(clock) = &self.options.fault_clock {
                *clock.lock().expect("fault clock") = Some(Instant::now());
            }
            log::warn!("{}: injected {kind:?} at iteration {iteration}", self.role);
            if let FaultKind::Hang(d) = kind {
                std::thread::sleep(d);
            }
            return Err(Stop::Fault(Injected));
        }
        Ok(())
    }

    fn apply(&mut self, grads: Vec<(String, Tensor)>) -> Result<()> {
        let names = role_param_names(&self.model, self.role);
        let mut ordered = names
            .into_iter()
            .map(|n| {
                grads
                    .iter()
                    .find(|(g, _)| *g == n)
                    .map(|(_, t)| (n.clone(), t.clone()))
                    .ok_or_else(|| Error::Protocol(format!("{}: no gradient for {n}", self.role)))
            })
            .collect::<Result<Vec<_>>>()?;
        step_named(&mut self.model, &mut self.opt, &mut ordered)?;
        if self.options.record_grads {
            self.grads.extend(grads);
        }
        Ok(())
    }

    fn send_record(&mut self, iteration: usize, d: Option<f64>) -> Result<()> {
        let bytes = self.mesh.stats().total_bytes();
        let d = d.map_or_else(|| "-".to_string(), |v| format!("{v:e}"));
        self.mesh
            .link(RoleId::HolderA)
            .send_frame(MessageKind::TraceRecord, format!("{iteration} {d} {bytes}").into_bytes())
    }
}

fn parse_record(from: RoleId, payload: &[u8], iteration: usize) -> Result<(Option<f64>, u64)> {
    let s = std::str::from_utf8(payload).map_err(|_| Error::Protocol(format!("{from}: trace record is not UTF-8")))?;
    let f: Vec<&str> = s.split(' ').collect();
    let bad = || Error::Protocol(format!("{from}: malformed trace record `{s}`"));
    if f.len() != 3 || f[0].parse::<usize>().ok() != Some(iteration) {
        return Err(bad());
    }
    let d = if f[1] == "-" { None } else { Some(f[1].parse().map_err(|_| bad())?) };
    Ok((d, f[2].parse().map_err(|_| bad())?))
}

fn encode(t: &Tensor, fx: &FxConfig) -> Result<FxMatrix> {
    FxMatrix::encode_tensor(t, fx)
}

/// `bias` repeated over `rows` rows, encoded.
fn encode_bias(bias: &Tensor, rows: usize, fx: &FxConfig) -> Result<FxMatrix> {
    encode(&Tensor::zeros(rows, bias.cols()).add_row(bias)?, fx)
}

/// Runs one role to completion. Errors abort the session toward the peers;
/// injected faults leave silently.
pub fn run_role(role: RoleId, mut mesh: Mesh, setup: RoleSetup) -> RoleReport {
    let mut grads = Vec::new();
    let mut params = TensorArchive::new();
    let mut injected = false;
    let result = match setup_ctx(role, &mut mesh, &setup) {
        Err(e) => Err(e),
        Ok((model, schedule, dims)) => {
            let secure = setup.cfg.first_layer == FirstLayerMode::Secure;
            let mut ctx = Ctx {
                fx: setup.cfg.fx().expect("validated"),
                cfg: setup.cfg.clone(),
                role,
                mesh,
                opt: match optimizer(&setup.cfg) {
                    Ok(o) => o,
                    Err(e) => return failed(role, e, TensorArchive::new()),
                },
                model,
                schedule,
                options: setup.options.clone(),
                grads: Vec::new(),
                secure,
            };
            let out = match role {
                RoleId::Server => run_server(&mut ctx),
                _ => run_holder(&mut ctx, setup, dims),
            };
            params = ctx.model.role_archive(role);
            grads = std::mem::take(&mut ctx.grads);
            mesh = ctx.mesh;
            match out {
                Ok(o) => Ok(o),
                Err(Stop::Err(e)) => Err(e),
                Err(Stop::Fault(Injected)) => {
                    injected = true;
                    Err(Error::Protocol(format!("{role} stopped by injected fault")))
                }
            }
        }
    };
    if let Err(e) = &result {
        if !injected {
            log::error!("{role}: {e}");
            mesh.abort_all(&e.to_string());
        }
    }
    let stats = mesh.stats();
    drop(mesh);
    RoleReport {
        role,
        result,
        params,
        grads,
        stats,
        finished: Instant::now(),
        injected,
    }
}

fn failed(role: RoleId, e: Error, params: TensorArchive) -> RoleReport {
    RoleReport {
        role,
        result: Err(e),
        params,
        grads: Vec::new(),
        stats: LinkStats::default(),
        finished: Instant::now(),
        injected: false,
    }
}

fn setup_ctx(role: RoleId, mesh: &mut Mesh, setup: &RoleSetup) -> Result<(ModelPartition, Schedule, FeatureDims)> {
    let cfg = &setup.cfg;
    cfg.validate()?;
    if mesh.role() != role {
        return Err(Error::Protocol(format!("mesh belongs to {}, not {role}", mesh.role())));
    }
    let info = match (&setup.input, role) {
        (Some(input), r) if r.is_holder() => {
            if (r == RoleId::HolderA) != input.labels.is_some() {
                return Err(Error::Config("labels belong to holder A and only holder A".into()));
            }
            holder_info(input)
        }
        (None, RoleId::Server) => "server".to_string(),
        _ => return Err(Error::Config(format!("{role} was given the wrong kind of input"))),
    };
    mesh.set_throttle(cfg.throttle);
    let infos = mesh.handshake(&cfg.digest(), &info, cfg.handshake_timeout)?;
    mesh.set_timeout(cfg.step_timeout);
    let a = parse_info(RoleId::HolderA, &infos[RoleId::HolderA.index()])?;
    let b = parse_info(RoleId::HolderB, &infos[RoleId::HolderB.index()])?;
    if (a.n_train, a.n_test) != (b.n_train, b.n_test) {
        return Err(Error::Protocol(format!(
            "holders disagree on fold sizes: A has {}/{}, B has {}/{}",
            a.n_train, a.n_test, b.n_train, b.n_test
        )));
    }
    let dims = FeatureDims {
        a: a.features,
        b: b.features,
    };
    let mut model = ModelPartition::init(cfg, dims)?;
    if let Some(p) = &setup.params {
        model.load_role(role, p)?;
    }
    let mut schedule = Schedule::new(cfg, a.n_train, a.n_test);
    if let Some(n) = setup.options.max_steps {
        schedule = schedule.limit(n);
    }
    if setup.options.skip_final_eval {
        schedule = schedule.without_final_eval();
    }
    Ok((model, schedule, dims))
}

/// Which fold an evaluation pass reads.
#[derive(Clone, Copy)]
enum Fold {
    Train,
    Test,
}

struct Holder {
    input: HolderInput,
    partner: RoleId,
    mpc: Option<MpcParty>,
    defender: Option<DefenderNet>,
    trace: TrainingTrace,
    start: Instant,
}

/// Forward state a holder keeps for the backward pass.
struct JointCache {
    /// Shares of the joint layers' outputs below the cut (cut > 1 only).
    h_shares: Vec<FxMatrix>,
}

fn run_holder(ctx: &mut Ctx, mut setup: RoleSetup, dims: FeatureDims) -> StepResult<RoleOutput> {
    let role = ctx.role;
    let input = setup.input.take().expect("checked in setup");
    let mpc = if ctx.secure {
        let provider = setup
            .provider
            .take()
            .ok_or_else(|| Error::Config("secure mode needs a triple provider".into()))?;
        let tag = ctx.mesh.link(RoleId::Server).session();
        Some(MpcParty::new(role, ctx.fx, tag, provider, setup.masks)?)
    } else {
        None
    };
    let mut h = Holder {
        partner: if role == RoleId::HolderA { RoleId::HolderB } else { RoleId::HolderA },
        defender: defender_for(&ctx.cfg, role, dims)?,
        input,
        mpc,
        trace: TrainingTrace {
            config_digest: ctx.cfg.digest_hex(),
            dataset: setup.dataset_fingerprint.clone(),
            records: Vec::new(),
        },
        start: Instant::now(),
    };
    if let Some(d) = &mut h.defender {
        let loaded = if role == RoleId::HolderA { &ctx.model.defender_a } else { &ctx.model.defender_b };
        if let Some(net) = loaded {
            *d.net_mut() = net.clone();
        }
    }
    let steps = std::mem::take(&mut ctx.schedule.steps);
    for step in &steps {
        ctx.maybe_fault(step.iteration, FaultPhase::StepStart)?;
        holder_train_step(ctx, &mut h, step)?;
    }
    let mut out = RoleOutput::default();
    let final_train = std::mem::take(&mut ctx.schedule.final_train_chunks);
    let final_test = std::mem::take(&mut ctx.schedule.final_test_chunks);
    let train_scores = holder_eval(ctx, &mut h, Fold::Train, &final_train)?;
    let test_scores = holder_eval(ctx, &mut h, Fold::Test, &final_test)?;
    if role == RoleId::HolderA {
        out.train_scores = train_scores;
        out.test_scores = test_scores;
        out.trace = Some(std::mem::take(&mut h.trace));
    }
    out.triples_used = h.mpc.as_ref().map_or(0, MpcParty::triples_used);
    Ok(out)
}

fn set_defender(model: &mut ModelPartition, role: RoleId, d: &DefenderNet) {
    let slot = if role == RoleId::HolderA { &mut model.defender_a } else { &mut model.defender_b };
    *slot = Some(d.net().clone());
}

/// First layer (and any joint layers) for one batch; the cut layer's
/// pre-activation leaves for the server.
fn holder_forward(ctx: &mut Ctx, h: &mut Holder, x: &Tensor) -> Result<JointCache> {
    let role = ctx.role;
    let theta = if role == RoleId::HolderA { &ctx.model.theta_a } else { &ctx.model.theta_b };
    let Some(mpc) = h.mpc.as_mut() else {
        let p = x.matmul(theta)?;
        ctx.mesh.link(RoleId::Server).send_real(MessageKind::HiddenActivations, &p)?;
        return Ok(JointCache { h_shares: Vec::new() });
    };
    let fx = ctx.fx;
    let n = x.rows();
    let z = mpc.secure_first_layer(ctx.mesh.link(h.partner), &encode(x, &fx)?, &encode(theta, &fx)?)?;
    let mut share = z.payload;
    let mut h_shares = Vec::new();
    for l in 1..ctx.model.cut() {
        if role == RoleId::HolderA {
            share.add_assign(&encode_bias(&ctx.model.joint_biases[l - 1], n, &fx)?)?;
        }
        let w = &ctx.model.joint_weights[l - 1];
        let enc_w = if role == RoleId::HolderA { Some(encode(w, &fx)?) } else { None };
        let raw = mpc.shared_times_private(ctx.mesh.link(h.partner), RoleId::HolderA, &share, enc_w.as_ref(), w.shape())?;
        h_shares.push(share);
        share = mpc.truncate(&raw);
    }
    ctx.mesh.link(RoleId::Server).send_ring(MessageKind::ShareBlock, &share)?;
    Ok(JointCache { h_shares })
}

fn holder_eval(ctx: &mut Ctx, h: &mut Holder, fold: Fold, chunks: &[Vec<usize>]) -> StepResult<Option<Tensor>> {
    if chunks.is_empty() {
        return Ok(None);
    }
    let mut scores = Vec::new();
    for rows in chunks {
        let src = match fold {
            Fold::Train => &h.input.train,
            Fold::Test => &h.input.test,
        };
        let x = src.select_rows(rows);
        holder_forward(ctx, h, &x)?;
        if ctx.role == RoleId::HolderA {
            let h_last = ctx.mesh.link(RoleId::Server).recv_real(MessageKind::HiddenActivations)?;
            let (y_hat, _) = dense_forward(&h_last, &ctx.model.output, Activation::Sigmoid)?;
            scores.extend_from_slice(y_hat.data());
        }
    }
    if ctx.role != RoleId::HolderA {
        return Ok(None);
    }
    Ok(Some(Tensor::from_vec(scores.len(), 1, scores)?))
}

fn holder_train_step(ctx: &mut Ctx, h: &mut Holder, step: &TrainStep) -> StepResult<()> {
    let role = ctx.role;
    let is_a = role == RoleId::HolderA;
    ctx.grads.clear();
    let x = h.input.train.select_rows(&step.rows);
    let n = x.rows();
    let cache = holder_forward(ctx, h, &x)?;
    ctx.maybe_fault(step.iteration, FaultPhase::AfterForward)?;
    let cut = ctx.model.cut();
    let server = RoleId::Server;

    let h1 = if cut == 1 {
        Some(ctx.mesh.link(server).recv_real(MessageKind::HiddenActivations)?)
    } else {
        None
    };
    let mut grads: Vec<(String, Tensor)> = Vec::new();
    let mut train_loss = f64::NAN;
    if is_a {
        let h_last = ctx.mesh.link(server).recv_real(MessageKind::HiddenActivations)?;
        let (y_hat, out_cache) = dense_forward(&h_last, &ctx.model.output, Activation::Sigmoid)?;
        let labels = h.input.labels.as_ref().expect("holder A has labels");
        let y = labels.train.select_rows(&step.rows);
        let loss = logistic_loss(&y_hat, &y)?;
        if !loss.loss.is_finite() {
            return Err(Error::Diverged {
                step: step.iteration,
                loss: loss.loss,
            }
            .into());
        }
        train_loss = loss.loss;
        let og = dense_backward(&loss.grad, &out_cache, &ctx.model.output)?;
        ctx.mesh.link(server).send_real(MessageKind::Gradient, &og.input)?;
        grads.push(("output/weights".into(), og.weights));
        grads.push(("output/bias".into(), og.bias));
    }

    let lambda = ctx.cfg.lambda;
    let dstep = match (&mut h.defender, &h1) {
        (Some(d), Some(h1)) => Some(d.step(h1, &x)?),
        _ => None,
    };
    if let Some(s) = &dstep {
        let prefix = if is_a { "defender_a" } else { "defender_b" };
        if ctx.options.record_grads {
            for (i, lg) in s.param_grads.iter().enumerate() {
                ctx.grads.push((format!("{prefix}/{i}/weights"), lg.weights.scale(-lambda)));
                ctx.grads.push((format!("{prefix}/{i}/bias"), lg.bias.scale(-lambda)));
            }
        }
    }

    let own = if is_a { "theta_a" } else { "theta_b" };
    if cut == 1 {
        let h1 = h1.expect("cut 1 receives h1");
        let g = ctx.mesh.link(server).recv_real(MessageKind::Gradient)?;
        let act = ctx.model.acts[0];
        let theta_grad = match (&dstep, h.mpc.is_some()) {
            (None, _) => x.t_matmul(&act.backward(&g, &h1)?)?,
            (Some(s), false) => {
                let link = ctx.mesh.link(h.partner);
                link.send_real(MessageKind::DefenderStats, &s.sensitivity)?;
                let other = link.recv_real(MessageKind::DefenderStats)?;
                ctx.mesh.link(server).send_real(MessageKind::DefenderStats, &s.sensitivity)?;
                let terms = if is_a { (&s.sensitivity, &other) } else { (&other, &s.sensitivity) };
                let total = with_defender_terms(&g, Some(terms), lambda)?;
                x.t_matmul(&act.backward(&total, &h1)?)?
            }
            (Some(s), true) => {
                let base = x.t_matmul(&act.backward(&g, &h1)?)?;
                let q = secure_defender_term(ctx, h, &x, &h1, &s.sensitivity)?;
                base.sub(&q.scale(lambda / n as f64))?
            }
        };
        grads.push((own.into(), theta_grad));
    } else {
        let delta = ctx.mesh.link(server).recv_real(MessageKind::Gradient)?;
        let delta1 = joint_backward(ctx, h, &cache, delta, &mut grads)?;
        grads.push((own.into(), x.t_matmul(&delta1)?));
    }

    if let Some(d) = &h.defender {
        set_defender(&mut ctx.model, role, d);
    }
    ctx.apply(grads)?;

    let test_loss = if step.test_loss {
        let chunks = ctx.schedule.test_loss_chunks.clone();
        let scores = holder_eval(ctx, h, Fold::Test, &chunks)?;
        match (scores, &h.input.labels) {
            (Some(s), Some(l)) => {
                let y = l.test.slice_rows(0, s.rows());
                Some(logistic_loss(&s, &y)?.loss)
            }
            _ => None,
        }
    } else {
        None
    };

    let d_own = dstep.as_ref().map(|s| s.d);
    if is_a {
        let b = ctx.mesh.link(RoleId::HolderB).recv_frame(MessageKind::TraceRecord)?;
        let (d_b, bytes_b) = parse_record(RoleId::HolderB, &b, step.iteration)?;
        let s = ctx.mesh.link(server).recv_frame(MessageKind::TraceRecord)?;
        let (_, bytes_s) = parse_record(server, &s, step.iteration)?;
        h.trace.push(TraceRecord {
            iteration: step.iteration,
            train_loss,
            test_loss,
            d_a: d_own,
            d_b,
            elapsed_ms: ctx.cfg.timing.then(|| h.start.elapsed().as_secs_f64() * 1e3),
            bytes_tx: ctx.mesh.stats().total_bytes() + bytes_b + bytes_s,
        })?;
    } else {
        ctx.send_record(step.iteration, d_own)?;
    }
    Ok(())
}

/// `X_ownᵀ ((n D_A + n D_B) ⊙ f1'(h1))`, reconstructed at its owner, where
/// `D_p = ∂d_p/∂h1`. Neither holder sees the other's `D`; the server receives
/// shares of the column sums for the bias gradient.
fn secure_defender_term(ctx: &mut Ctx, h: &mut Holder, x: &Tensor, h1: &Tensor, sensitivity: &Tensor) -> Result<Tensor> {
    let fx = ctx.fx;
    let n = x.rows() as f64;
    let mpc = h.mpc.as_mut().expect("secure mode");
    let link = ctx.mesh.link(h.partner);
    let (keep, send) = mpc.share_own(&encode(&sensitivity.scale(n), &fx)?);
    link.send_ring(MessageKind::DefenderStats, &send)?;
    let mut d_share = keep;
    d_share.add_assign(&link.recv_ring(MessageKind::DefenderStats)?)?;
    let slope = ctx.model.acts[0].backward(&Tensor::filled(h1.rows(), h1.cols(), 1.0), h1)?;
    let s_share = mpc.truncate(&d_share.hadamard_raw(&encode(&slope, &fx)?)?);

    let xt = encode(&x.transpose(), &fx)?;
    let dims = |r: RoleId| {
        let d = if r == RoleId::HolderA { ctx.model.theta_a.rows() } else { ctx.model.theta_b.rows() };
        (d, x.rows())
    };
    let mut parts = Vec::with_capacity(2);
    for owner in [RoleId::HolderA, RoleId::HolderB] {
        let mine = (owner == mpc.role()).then_some(&xt);
        let raw = mpc.private_times_shared(link, owner, mine, dims(owner), &s_share)?;
        parts.push(mpc.truncate(&raw));
    }
    let (own_part, other_part) = if mpc.role() == RoleId::HolderA {
        (parts.remove(0), parts.remove(0))
    } else {
        let b = parts.remove(1);
        (b, parts.remove(0))
    };
    link.send_ring(MessageKind::ShareBlock, &other_part)?;
    let mut q = own_part;
    q.add_assign(&link.recv_ring(MessageKind::ShareBlock)?)?;
    ctx.mesh
        .link(RoleId::Server)
        .send_ring(MessageKind::ShareBlock, &s_share.col_sums())?;
    q.decode_tensor(&fx)
}

/// Backward through joint layers `cut..=2`. Returns the first layer's
/// pre-activation gradient; joint weight and bias gradients land at holder A.
fn joint_backward(
    ctx: &mut Ctx,
    h: &mut Holder,
    cache: &JointCache,
    mut delta: Tensor,
    grads: &mut Vec<(String, Tensor)>,
) -> Result<Tensor> {
    let fx = ctx.fx;
    let is_a = ctx.role == RoleId::HolderA;
    let cut = ctx.model.cut();
    let mpc = h.mpc.as_mut().expect("joint layers are secure");
    for l in (1..cut).rev() {
        // Layer l+1 (1-based) maps the output of layer l through joint_weights[l-1].
        let part = mpc.truncate(&cache.h_shares[l - 1].transpose().matmul_raw(&encode(&delta, &fx)?)?);
        let link = ctx.mesh.link(h.partner);
        if is_a {
            let mut w_grad = part;
            w_grad.add_assign(&link.recv_ring(MessageKind::ShareBlock)?)?;
            grads.push((format!("joint/{}/weights", l - 1), w_grad.decode_tensor(&fx)?));
            if l + 1 < cut {
                grads.push((format!("joint/{l}/bias"), delta.col_sums()));
            }
            delta = delta.matmul_t(&ctx.model.joint_weights[l - 1])?;
            link.send_real(MessageKind::Gradient, &delta)?;
        } else {
            link.send_ring(MessageKind::ShareBlock, &part)?;
            delta = link.recv_real(MessageKind::Gradient)?;
        }
    }
    if is_a {
        grads.push(("joint/0/bias".into(), delta.col_sums()));
    }
    Ok(delta)
}

fn server_recv_cut(ctx: &mut Ctx, anomalies: &mut u64) -> Result<Tensor> {
    if ctx.secure {
        let mut z = ctx.mesh.link(RoleId::HolderA).recv_ring(MessageKind::ShareBlock)?;
        let zb = ctx.mesh.link(RoleId::HolderB).recv_ring(MessageKind::ShareBlock)?;
        z.add_assign(&zb)
            .map_err(|_| Error::Protocol("holders sent first-layer shares of different shapes".into()))?;
        let t = z.decode_tensor(&ctx.fx)?;
        let bound = ctx.fx.mag_bound();
        let over = t.data().iter().filter(|v| v.abs() > bound).count() as u64;
        if over > 0 {
            log::warn!("{over} first-layer entries exceed the fixed-point bound {bound}");
            *anomalies += over;
        }
        Ok(t)
    } else {
        let pa = ctx.mesh.link(RoleId::HolderA).recv_real(MessageKind::HiddenActivations)?;
        let pb = ctx.mesh.link(RoleId::HolderB).recv_real(MessageKind::HiddenActivations)?;
        pa.add(&pb)
    }
}

fn run_server(ctx: &mut Ctx) -> StepResult<RoleOutput> {
    let mut anomalies = 0u64;
    let steps = std::mem::take(&mut ctx.schedule.steps);
    let cut = ctx.model.cut();
    let act = ctx.model.acts[cut - 1];
    for step in &steps {
        ctx.maybe_fault(step.iteration, FaultPhase::StepStart)?;
        let z = server_recv_cut(ctx, &mut anomalies)?;
        let h_cut = cut_activation(&z, &ctx.model.cut_bias, act)?;
        let (h_last, cache) = ctx.model.server.forward(&h_cut)?;
        if cut == 1 {
            for r in [RoleId::HolderA, RoleId::HolderB] {
                ctx.mesh.link(r).send_real(MessageKind::HiddenActivations, &h_cut)?;
            }
        }
        ctx.mesh.link(RoleId::HolderA).send_real(MessageKind::HiddenActivations, &h_last)?;
        ctx.maybe_fault(step.iteration, FaultPhase::AfterForward)?;

        let grad_last = ctx.mesh.link(RoleId::HolderA).recv_real(MessageKind::Gradient)?;
        let (g, layer_grads) = ctx.model.server.backward(&grad_last, &cache)?;
        let n = z.rows() as f64;
        let bias_grad = if cut == 1 {
            for r in [RoleId::HolderA, RoleId::HolderB] {
                ctx.mesh.link(r).send_real(MessageKind::Gradient, &g)?;
            }
            match (ctx.cfg.lambda > 0.0, ctx.secure) {
                (false, _) => act.backward(&g, &h_cut)?.col_sums(),
                (true, false) => {
                    let da = ctx.mesh.link(RoleId::HolderA).recv_real(MessageKind::DefenderStats)?;
                    let db = ctx.mesh.link(RoleId::HolderB).recv_real(MessageKind::DefenderStats)?;
                    let total = with_defender_terms(&g, Some((&da, &db)), ctx.cfg.lambda)?;
                    act.backward(&total, &h_cut)?.col_sums()
                }
                (true, true) => {
                    let mut c = ctx.mesh.link(RoleId::HolderA).recv_ring(MessageKind::ShareBlock)?;
                    c.add_assign(&ctx.mesh.link(RoleId::HolderB).recv_ring(MessageKind::ShareBlock)?)?;
                    let c = c.decode_tensor(&ctx.fx)?;
                    act.backward(&g, &h_cut)?
                        .col_sums()
                        .sub(&c.scale(ctx.cfg.lambda / n))?
                }
            }
        } else {
            let delta = act.backward(&g, &h_cut)?;
            for r in [RoleId::HolderA, RoleId::HolderB] {
                ctx.mesh.link(r).send_real(MessageKind::Gradient, &delta)?;
            }
            delta.col_sums()
        };
        let mut grads = vec![("cut_bias".to_string(), bias_grad)];
        for (i, lg) in layer_grads.into_iter().enumerate() {
            grads.push((format!("server/{i}/weights"), lg.weights));
            grads.push((format!("server/{i}/bias"), lg.bias));
        }
        ctx.grads.clear();
        ctx.apply(grads)?;

        if step.test_loss {
            let chunks = ctx.schedule.test_loss_chunks.clone();
            server_eval(ctx, &chunks, &mut anomalies)?;
        }
        ctx.send_record(step.iteration, None)?;
    }
    let final_train = std::mem::take(&mut ctx.schedule.final_train_chunks);
    let final_test = std::mem::take(&mut ctx.schedule.final_test_chunks);
    server_eval(ctx, &final_train, &mut anomalies)?;
    server_eval(ctx, &final_test, &mut anomalies)?;
    Ok(RoleOutput {
        anomalies,
        ..Default::default()
    })
}

fn server_eval(ctx: &mut Ctx, chunks: &[Vec<usize>], anomalies: &mut u64) -> Result<()> {
    let act = ctx.model.acts[ctx.model.cut() - 1];
    for _ in chunks {
        let z = server_recv_cut(ctx, anomalies)?;
        let h_cut = cut_activation(&z, &ctx.model.cut_bias, act)?;
        let h_last = ctx.model.server.predict(&h_cut)?;
        ctx.mesh
            .link(RoleId::HolderA)
            .send_real(MessageKind::HiddenActivations, &h_last)?;
    }
    Ok(())
}
