mod common;

use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use common::{fraud, small_cfg};
use p2n2::config::FirstLayerMode;
use p2n2::nn::Activation;
use p2n2::protocol::{
    dealer_seed, finish, mask_seed, predict_local, run_local, run_role, train_local, FaultKind, FaultPhase, FaultPlan,
    HolderInput, LocalSim, Monolithic, RoleSetup, RunOptions, Schedule, SplitData,
};
use p2n2::share::SeededDealer;
use p2n2::transport::{tcp_mesh, Endpoints};
use p2n2::{Error, RoleId, SessionConfig};

fn limited(steps: usize) -> LocalSim {
    LocalSim {
        options: RunOptions {
            max_steps: Some(steps),
            skip_final_eval: true,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn mono_run(cfg: &SessionConfig, data: &SplitData, steps: usize) -> (Monolithic, Vec<p2n2::protocol::MonoStep>) {
    let mut m = Monolithic::new(cfg, data.dims()).unwrap();
    let sched = Schedule::new(cfg, data.n_train(), data.n_test()).limit(steps);
    let y = &data.a.labels.as_ref().unwrap().train;
    let out = sched
        .steps
        .iter()
        .map(|s| {
            m.train_step(
                &data.a.train.select_rows(&s.rows),
                &data.b.train.select_rows(&s.rows),
                &y.select_rows(&s.rows),
            )
            .unwrap()
        })
        .collect();
    (m, out)
}

#[test]
fn plaintext_split_equals_monolithic_bitwise() {
    let data = fraud(600, 1);
    for lambda in [0.0, 0.5] {
        let cfg = SessionConfig {
            first_layer: FirstLayerMode::Plaintext,
            lambda,
            ..small_cfg()
        };
        let out = run_local(&cfg, &data, &limited(12)).unwrap();
        assert!(out.root_error().is_none(), "{:?}", out.root_error());
        let split = out.partition(&cfg).unwrap();
        let trace = out.reports[0].result.as_ref().unwrap().trace.clone().unwrap();
        let (mono, steps) = mono_run(&cfg, &data, 12);
        assert_eq!(trace.records.len(), 12);
        for (r, m) in trace.records.iter().zip(&steps) {
            assert_eq!(r.train_loss.to_bits(), m.loss.to_bits(), "λ={lambda} step {}", r.iteration);
            assert_eq!(r.d_a, m.d_a);
            assert_eq!(r.d_b, m.d_b);
        }
        assert_eq!(split, mono.model, "λ={lambda}");
    }
}

#[test]
fn secure_first_layer_tracks_plaintext_training() {
    let data = fraud(600, 2);
    for lambda in [0.0, 0.5] {
        let base = SessionConfig { lambda, ..small_cfg() };
        let plain = SessionConfig {
            first_layer: FirstLayerMode::Plaintext,
            ..base.clone()
        };
        let s = run_local(&base, &data, &limited(15)).unwrap();
        let p = run_local(&plain, &data, &limited(15)).unwrap();
        let ts = s.reports[0].result.as_ref().unwrap().trace.clone().unwrap();
        let tp = p.reports[0].result.as_ref().unwrap().trace.clone().unwrap();
        for (a, b) in ts.records.iter().zip(&tp.records) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-3, "{a:?} vs {b:?}");
        }
        let (ps, pp) = (s.partition(&base).unwrap(), p.partition(&plain).unwrap());
        assert!(ps.theta_a.max_abs_diff(&pp.theta_a) < 1e-3);
        assert!(ps.theta_b.max_abs_diff(&pp.theta_b) < 1e-3);
        assert!(ps.cut_bias.max_abs_diff(&pp.cut_bias) < 1e-3);
        assert_eq!(s.report(RoleId::Server).result.as_ref().unwrap().anomalies, 0);
    }
}

#[test]
fn joint_linear_layers_below_the_cut_match_monolithic() {
    let data = fraud(400, 3);
    let cfg = SessionConfig {
        hidden: vec![6, 5, 4],
        activations: vec![Activation::Linear, Activation::Sigmoid, Activation::Sigmoid],
        cut_layer: 2,
        ..small_cfg()
    };
    let out = run_local(&cfg, &data, &limited(8)).unwrap();
    assert!(out.root_error().is_none(), "{:?}", out.root_error());
    let split = out.partition(&cfg).unwrap();
    let (mono, steps) = mono_run(&cfg, &data, 8);
    let trace = out.reports[0].result.as_ref().unwrap().trace.clone().unwrap();
    for (r, m) in trace.records.iter().zip(&steps) {
        assert!((r.train_loss - m.loss).abs() < 1e-3);
    }
    assert!(split.joint_weights[0].max_abs_diff(&mono.model.joint_weights[0]) < 1e-3);
    assert!(split.joint_biases[0].max_abs_diff(&mono.model.joint_biases[0]) < 1e-3);
    assert!(split.theta_b.max_abs_diff(&mono.model.theta_b) < 1e-3);
}

#[test]
fn seeded_runs_are_reproducible_and_trace_is_complete() {
    let data = fraud(500, 4);
    let cfg = small_cfg();
    let a = train_local(&cfg, &data).unwrap();
    let b = train_local(&cfg, &data).unwrap();
    assert_eq!(a.trace.render(), b.trace.render());
    assert_eq!(a.partition, b.partition);
    let n = Schedule::new(&cfg, data.n_train(), data.n_test()).steps.len();
    assert_eq!(a.trace.records.len(), n);
    assert_eq!(a.trace.config_digest, cfg.digest_hex());
    assert_eq!(a.trace.dataset, data.fingerprint);
    let tl = a.trace.test_losses();
    assert_eq!(tl.len(), n.div_ceil(cfg.test_every));
    assert!(a.trace.records.windows(2).all(|w| w[0].bytes_tx < w[1].bytes_tx));
    assert!(a.trace.records.iter().all(|r| r.d_a.is_none() && r.elapsed_ms.is_none()));
    assert_eq!(a.test_scores.as_ref().unwrap().rows(), data.n_test());
    assert!(a.test_auc.is_some() && a.train_auc.is_some());
}

#[test]
fn predict_reproduces_final_test_scores() {
    let data = fraud(500, 5);
    let cfg = small_cfg();
    let out = train_local(&cfg, &data).unwrap();
    let scores = predict_local(&cfg, &out.partition, &data.a.test, &data.b.test).unwrap();
    let reference = out.partition.predict(&data.a.test, &data.b.test).unwrap();
    assert!(scores.max_abs_diff(out.test_scores.as_ref().unwrap()) < 1e-4);
    assert!(scores.max_abs_diff(&reference) < 1e-4);
}

fn fault_run(cfg: &SessionConfig, data: &SplitData, plan: FaultPlan) -> p2n2::protocol::SimOutcome {
    let clock = Arc::new(Mutex::new(None));
    let sim = LocalSim {
        options: RunOptions {
            fault: Some(plan),
            fault_clock: Some(clock.clone()),
            ..Default::default()
        },
        ..Default::default()
    };
    let out = run_local(cfg, data, &sim).unwrap();
    let fired = clock.lock().unwrap().expect("fault fired");
    for r in &out.reports {
        if r.role == plan.role {
            assert!(r.injected);
            continue;
        }
        let e = r.result.as_ref().expect_err("peer must fail");
        assert!(e.is_abort_or_timeout(), "{}: {e}", r.role);
        let waited = r.finished.saturating_duration_since(fired);
        assert!(waited <= cfg.step_timeout + Duration::from_millis(500), "{}: {waited:?}", r.role);
    }
    out
}

#[test]
fn crash_surfaces_at_both_peers_and_keeps_last_good_params() {
    let data = fraud(400, 6);
    let cfg = SessionConfig {
        step_timeout: Duration::from_secs(2),
        ..small_cfg()
    };
    for role in RoleId::ALL {
        let out = fault_run(
            &cfg,
            &data,
            FaultPlan {
                role,
                iteration: 3,
                kind: FaultKind::Crash,
                phase: FaultPhase::AfterForward,
            },
        );
        let good = run_local(&cfg, &data, &limited(3)).unwrap().partition(&cfg).unwrap();
        assert_eq!(out.partition(&cfg).unwrap(), good, "crash at {role}");
    }
}

#[test]
fn hang_times_out_at_both_peers() {
    let data = fraud(300, 7);
    let cfg = SessionConfig {
        step_timeout: Duration::from_millis(700),
        ..small_cfg()
    };
    let out = fault_run(
        &cfg,
        &data,
        FaultPlan {
            role: RoleId::HolderB,
            iteration: 1,
            kind: FaultKind::Hang(Duration::from_millis(1700)),
            phase: FaultPhase::StepStart,
        },
    );
    assert!(out.report(RoleId::HolderB).injected);
}

#[test]
fn divergence_is_reported_with_the_step() {
    let data = fraud(300, 8);
    let cfg = SessionConfig {
        learning_rate: 1e250,
        first_layer: FirstLayerMode::Plaintext,
        activations: vec![Activation::Relu, Activation::Relu],
        ..small_cfg()
    };
    let out = run_local(&cfg, &data, &LocalSim::default()).unwrap();
    let err = finish(&cfg, &data, out).unwrap_err();
    assert!(
        matches!(err, Error::Diverged { .. } | Error::NonFinite(_)),
        "{err}"
    );
}

#[test]
fn mismatched_configs_refuse_to_start() {
    let data = fraud(200, 9);
    let [ma, mb, ms] = p2n2::transport::loopback_mesh(Duration::from_secs(2));
    let cfg = small_cfg();
    let other = SessionConfig { lambda: 0.1, ..cfg.clone() };
    let setups: Vec<(RoleId, _, SessionConfig, Option<HolderInput>)> = vec![
        (RoleId::HolderA, ma, cfg.clone(), Some(data.a.clone())),
        (RoleId::HolderB, mb, other, Some(data.b.clone())),
        (RoleId::Server, ms, cfg.clone(), None),
    ];
    let handles: Vec<_> = setups
        .into_iter()
        .map(|(role, mesh, c, input)| {
            let provider: Option<Box<dyn p2n2::share::TripleProvider>> =
                input.as_ref().map(|_| Box::new(SeededDealer::new(dealer_seed(&c, 0))) as _);
            let setup = RoleSetup {
                masks: mask_seed(&c, role, 0),
                cfg: c,
                input,
                provider,
                dataset_fingerprint: String::new(),
                params: None,
                options: RunOptions::default(),
            };
            thread::spawn(move || run_role(role, mesh, setup))
        })
        .collect();
    for h in handles {
        let r = h.join().unwrap();
        assert!(r.result.is_err(), "{} started", r.role);
    }
}

#[test]
fn tcp_session_matches_loopback_session() {
    let data = fraud(300, 10);
    let cfg = small_cfg();
    let local = finish(&cfg, &data, run_local(&cfg, &data, &LocalSim::default()).unwrap()).unwrap();

    let lb = TcpListener::bind("127.0.0.1:0").unwrap();
    let ls = TcpListener::bind("127.0.0.1:0").unwrap();
    let peers = Endpoints::new(
        "127.0.0.1:1",
        lb.local_addr().unwrap().to_string(),
        ls.local_addr().unwrap().to_string(),
    );
    let mut listeners = [None, Some(lb), Some(ls)];
    let handles: Vec<_> = RoleId::ALL
        .into_iter()
        .map(|role| {
            let listener = listeners[role.index()].take();
            let peers = peers.clone();
            let cfg = cfg.clone();
            let input = match role {
                RoleId::HolderA => Some(data.a.clone()),
                RoleId::HolderB => Some(data.b.clone()),
                RoleId::Server => None,
            };
            let fingerprint = data.fingerprint.clone();
            thread::spawn(move || {
                let mesh = tcp_mesh(role, listener.as_ref(), &peers, Duration::from_secs(10), cfg.step_timeout).unwrap();
                let provider: Option<Box<dyn p2n2::share::TripleProvider>> =
                    input.as_ref().map(|_| Box::new(SeededDealer::new(dealer_seed(&cfg, 0))) as _);
                run_role(
                    role,
                    mesh,
                    RoleSetup {
                        masks: mask_seed(&cfg, role, 0),
                        cfg,
                        input,
                        provider,
                        dataset_fingerprint: fingerprint,
                        params: None,
                        options: RunOptions::default(),
                    },
                )
            })
        })
        .collect();
    let reports: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let outcome = p2n2::protocol::SimOutcome {
        reports,
        dims: data.dims(),
        started: std::time::Instant::now(),
    };
    let tcp = finish(&cfg, &data, outcome).unwrap();
    assert_eq!(tcp.trace.render(), local.trace.render());
    assert_eq!(tcp.partition, local.partition);
    assert_eq!(tcp.test_scores, local.test_scores);
}
