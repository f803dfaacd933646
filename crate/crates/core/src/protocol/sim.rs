//! In-process driver: three role threads over loopback links.

use std::thread;
use std::time::Instant;

use super::roles::{run_role, HolderInput, Labels, RoleReport, RoleSetup, RunOptions};
use super::{FeatureDims, ModelPartition, TrainingTrace};
use crate::config::{FirstLayerMode, SessionConfig};
use crate::data::{auc, vertical_split, Prepared, VerticalSplit};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::role::RoleId;
use crate::seed::SeedTree;
use crate::share::{SharedDealer, TripleProvider};
use crate::transport::{loopback_mesh, LinkStats, Tap};

/// Both holders' inputs for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub a: HolderInput,
    pub b: HolderInput,
    /// Fingerprint of the source dataset, recorded in traces.
    pub fingerprint: String,
}

impl SplitData {
    pub fn from_prepared(prep: &Prepared, split: &VerticalSplit) -> Result<Self> {
        let tr = vertical_split(&prep.train, split)?;
        let te = vertical_split(&prep.test, split)?;
        Ok(SplitData {
            a: HolderInput {
                train: tr.features_a,
                test: te.features_a,
                labels: Some(Labels {
                    train: tr.labels,
                    test: te.labels,
                }),
            },
            b: HolderInput {
                train: tr.features_b,
                test: te.features_b,
                labels: None,
            },
            fingerprint: prep.train.fingerprint_hex(),
        })
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            a: self.a.train.cols(),
            b: self.b.train.cols(),
        }
    }

    pub fn n_train(&self) -> usize {
        self.a.train.rows()
    }

    pub fn n_test(&self) -> usize {
        self.a.test.rows()
    }

    pub fn labels(&self) -> &Labels {
        self.a.labels.as_ref().expect("holder A carries labels")
    }
}

/// Knobs for a local run.
#[derive(Debug, Clone, Default)]
pub struct LocalSim {
    pub options: RunOptions,
    /// Captures every frame of the session.
    pub tap: Option<Tap>,
    /// Selects fresh holder masks and dealer triples for otherwise identical sessions.
    pub session_salt: u64,
    /// Start from these parameters instead of the seeded init.
    pub params: Option<ModelPartition>,
}

pub struct SimOutcome {
    /// Holder A, holder B, server.
    pub reports: Vec<RoleReport>,
    pub dims: FeatureDims,
    pub started: Instant,
}

impl SimOutcome {
    pub fn report(&self, role: RoleId) -> &RoleReport {
        &self.reports[role.index()]
    }

    /// The parameters the roles held when they stopped.
    pub fn partition(&self, cfg: &SessionConfig) -> Result<ModelPartition> {
        let mut p = ModelPartition::init(cfg, self.dims)?;
        for r in &self.reports {
            p.load_role(r.role, &r.params)?;
        }
        Ok(p)
    }

    fn root_index(&self) -> Option<usize> {
        let failed = |keep: fn(&Error) -> bool| {
            self.reports
                .iter()
                .position(|r| r.result.as_ref().err().is_some_and(keep))
        };
        failed(|e| !e.is_abort_or_timeout()).or_else(|| failed(|_| true))
    }

    /// The error that stopped the session, preferring the originating fault
    /// over the aborts and timeouts it caused at the other roles.
    pub fn root_error(&self) -> Option<&Error> {
        self.root_index()
            .and_then(|i| self.reports[i].result.as_ref().err())
    }

    pub fn into_root_error(mut self) -> Option<Error> {
        let i = self.root_index()?;
        self.reports.swap_remove(i).result.err()
    }

    pub fn stats(&self) -> LinkStats {
        let mut s = LinkStats::default();
        for r in &self.reports {
            s.merge(&r.stats);
        }
        s
    }

    /// Gradients recorded at every role, by parameter name.
    pub fn grads(&self) -> Vec<(String, Tensor)> {
        self.reports.iter().flat_map(|r| r.grads.iter().cloned()).collect()
    }
}

/// Mask stream of a holder in a seeded (reproducible) run.
pub fn mask_seed(cfg: &SessionConfig, role: RoleId, salt: u64) -> SeedTree {
    SeedTree::new(cfg.seed).child("masks").child_idx(role.name(), salt)
}

/// Root of the simulated dealer's triple stream. Triples must never repeat
/// across sessions, so the salt has to differ between sessions on one config.
pub fn dealer_seed(cfg: &SessionConfig, salt: u64) -> SeedTree {
    SeedTree::new(cfg.seed).child("dealer").child_idx("session", salt)
}

/// Runs all three roles in this process and waits for them.
pub fn run_local(cfg: &SessionConfig, data: &SplitData, sim: &LocalSim) -> Result<SimOutcome> {
    cfg.validate()?;
    let dims = data.dims();
    let params = match &sim.params {
        Some(p) if p.dims() != dims => {
            return Err(Error::Config(format!(
                "parameters are for features {:?}, data has {dims:?}",
                p.dims()
            )))
        }
        p => p.clone(),
    };
    let [ma, mb, ms] = loopback_mesh(cfg.step_timeout);
    let mut providers: [Option<Box<dyn TripleProvider>>; 2] = [None, None];
    if cfg.first_layer == FirstLayerMode::Secure {
        let (pa, pb) = SharedDealer::pair(dealer_seed(cfg, sim.session_salt), None);
        providers = [Some(Box::new(pa)), Some(Box::new(pb))];
    }
    let [pa, pb] = providers;
    let started = Instant::now();
    let plan = [
        (RoleId::HolderA, ma, Some(data.a.clone()), pa),
        (RoleId::HolderB, mb, Some(data.b.clone()), pb),
        (RoleId::Server, ms, None, None),
    ];
    let handles: Vec<_> = plan
        .into_iter()
        .map(|(role, mut mesh, input, provider)| {
            mesh.set_tap(sim.tap.clone());
            let setup = RoleSetup {
                cfg: cfg.clone(),
                input,
                provider,
                masks: mask_seed(cfg, role, sim.session_salt),
                dataset_fingerprint: data.fingerprint.clone(),
                params: params.as_ref().map(|p| p.role_archive(role)),
                options: sim.options.clone(),
            };
            thread::Builder::new()
                .name(role.name().to_string())
                .spawn(move || run_role(role, mesh, setup))
                .map_err(Error::Io)
        })
        .collect::<Result<_>>()?;
    let reports = handles
        .into_iter()
        .map(|h| h.join().map_err(|_| Error::Protocol("a role thread panicked".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimOutcome { reports, dims, started })
}

/// A finished training session.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub partition: ModelPartition,
    pub trace: TrainingTrace,
    pub train_scores: Option<Tensor>,
    pub test_scores: Option<Tensor>,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub anomalies: u64,
    pub stats: LinkStats,
    pub triples_used: usize,
}

fn auc_of(scores: &Option<Tensor>, labels: &Tensor) -> Result<Option<f64>> {
    match scores {
        Some(s) if !s.is_empty() => auc(s.data(), &labels.data()[..s.rows()]).map(Some),
        _ => Ok(None),
    }
}

/// Trains with all roles in-process and scores both folds.
pub fn train_local(cfg: &SessionConfig, data: &SplitData) -> Result<TrainOutput> {
    finish(cfg, data, run_local(cfg, data, &LocalSim::default())?)
}

/// Collects a successful outcome into a [`TrainOutput`].
pub fn finish(cfg: &SessionConfig, data: &SplitData, out: SimOutcome) -> Result<TrainOutput> {
    if out.root_error().is_some() {
        return Err(out.into_root_error().expect("checked"));
    }
    let partition = out.partition(cfg)?;
    let stats = out.stats();
    let mut reports = out.reports.into_iter();
    let a = reports.next().expect("three reports").result?;
    let b = reports.next().expect("three reports").result?;
    let s = reports.next().expect("three reports").result?;
    let labels = data.labels();
    Ok(TrainOutput {
        partition,
        trace: a.trace.unwrap_or_default(),
        train_auc: auc_of(&a.train_scores, &labels.train).ok().flatten(),
        test_auc: auc_of(&a.test_scores, &labels.test).ok().flatten(),
        train_scores: a.train_scores,
        test_scores: a.test_scores,
        anomalies: s.anomalies,
        stats,
        triples_used: a.triples_used + b.triples_used,
    })
}

/// Scores rows through the split protocol with fixed parameters.
pub fn predict_local(cfg: &SessionConfig, partition: &ModelPartition, x_a: &Tensor, x_b: &Tensor) -> Result<Tensor> {
    if x_a.rows() != x_b.rows() {
        return Err(Error::shape(
            "predict",
            format!("holder A has {} rows, holder B {}", x_a.rows(), x_b.rows()),
        ));
    }
    let data = SplitData {
        a: HolderInput {
            train: Tensor::zeros(0, x_a.cols()),
            test: x_a.clone(),
            labels: Some(Labels {
                train: Tensor::zeros(0, 1),
                test: Tensor::zeros(x_a.rows(), 1),
            }),
        },
        b: HolderInput {
            train: Tensor::zeros(0, x_b.cols()),
            test: x_b.clone(),
            labels: None,
        },
        fingerprint: String::new(),
    };
    let sim = LocalSim {
        params: Some(partition.clone()),
        session_salt: 1,
        ..Default::default()
    };
    let out = finish(cfg, &data, run_local(cfg, &data, &sim)?)?;
    out.test_scores
        .ok_or_else(|| Error::Protocol("prediction produced no scores".into()))
}
