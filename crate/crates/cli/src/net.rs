//! One role of a networked session over TCP.

use std::net::TcpListener;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use p2n2::checkpoint::TensorArchive;
use p2n2::config::FirstLayerMode;
use p2n2::data::auc;
use p2n2::experiment::{fmt_opt, split_data, MetricTable};
use p2n2::nn::Tensor;
use p2n2::protocol::{dealer_seed, run_role, HolderInput, Labels, RoleOutput, RoleReport, RoleSetup, RunOptions};
use p2n2::share::{SeededDealer, TripleProvider};
use p2n2::transport::{tcp_mesh, Endpoints};
use p2n2::{RoleId, SeedTree, SessionConfig};

use crate::args::NetArgs;
use crate::{report_scores, write, Input};

/// This process's rows: the holder's own feature block (and labels at holder
/// A), nothing at the server.
pub struct HolderData {
    input: Option<HolderInput>,
    fingerprint: String,
}

fn role(net: &NetArgs) -> Result<RoleId> {
    net.role.ok_or_else(|| anyhow!("--role is required without --local-sim"))
}

pub fn holder_data(net: &NetArgs, input: &Input, cfg: &SessionConfig) -> Result<HolderData> {
    let role = role(net)?;
    if role == RoleId::Server {
        return Ok(HolderData {
            input: None,
            fingerprint: String::new(),
        });
    }
    let ds = input.load(None)?;
    let data = split_data(&ds, cfg.seed, 1.0)?;
    let own = if role == RoleId::HolderA { data.a } else { data.b };
    Ok(HolderData {
        input: Some(own),
        fingerprint: data.fingerprint,
    })
}

fn connect_and_run(net: &NetArgs, cfg: &SessionConfig, data: HolderData, params: Option<TensorArchive>) -> Result<RoleReport> {
    let role = role(net)?;
    let peers = Endpoints::parse(net.peers.as_deref().ok_or_else(|| anyhow!("--peers (or P2N2_PEERS) is required"))?)?;
    let listener = match role {
        RoleId::HolderA => None,
        r => {
            let addr = net.listen.clone().unwrap_or_else(|| peers.addr(r).to_string());
            Some(TcpListener::bind(&addr).with_context(|| format!("listening on {addr}"))?)
        }
    };
    let provider: Option<Box<dyn TripleProvider>> = match (role, cfg.first_layer) {
        (RoleId::Server, _) | (_, FirstLayerMode::Plaintext) => None,
        _ => {
            let salt = net
                .session_salt
                .ok_or_else(|| anyhow!("holders in secure mode need --session-salt (the same fresh value at both)"))?;
            Some(Box::new(SeededDealer::new(dealer_seed(cfg, salt))))
        }
    };
    info!("{role}: connecting to peers");
    let mesh = tcp_mesh(role, listener.as_ref(), &peers, cfg.handshake_timeout, cfg.step_timeout)?;
    let report = run_role(
        role,
        mesh,
        RoleSetup {
            cfg: cfg.clone(),
            input: data.input,
            provider,
            masks: SeedTree::new(rand::random()),
            dataset_fingerprint: data.fingerprint,
            params,
            options: RunOptions::default(),
        },
    );
    Ok(report)
}

fn finished(report: RoleReport) -> Result<(RoleId, RoleOutput, TensorArchive)> {
    let role = report.role;
    match report.result {
        Ok(out) => Ok((role, out, report.params)),
        Err(e) => bail!("{role}: session failed: {e}"),
    }
}

pub fn train(net: &NetArgs, cfg: &SessionConfig, data: HolderData, out: &Path) -> Result<()> {
    let labels = data.input.as_ref().and_then(|i| i.labels.clone());
    let fingerprint = data.fingerprint.clone();
    let (role, output, params) = finished(connect_and_run(net, cfg, data, None)?)?;
    params.save(&out.join(format!("checkpoint-{role}.p2n2")))?;
    if let (Some(trace), Some(labels)) = (output.trace, labels) {
        trace.save(&out.join("trace.tsv"))?;
        let score = |s: &Option<Tensor>, y: &Tensor| s.as_ref().and_then(|s| auc(s.data(), y.data()).ok());
        let mut table = MetricTable::new("train summary", cfg, &fingerprint, &["seed", "train_auc", "test_auc"]);
        table.push(vec![
            cfg.seed.to_string(),
            fmt_opt(score(&output.train_scores, &labels.train)),
            fmt_opt(score(&output.test_scores, &labels.test)),
        ]);
        let text = table.render();
        print!("{text}");
        write(out.join("summary.tsv"), &text)?;
    }
    info!("{role}: done");
    Ok(())
}

pub fn eval(net: &NetArgs, cfg: &SessionConfig, data: HolderData, archive: &TensorArchive, out: &Path) -> Result<()> {
    let data = HolderData {
        input: data.input.map(|own| HolderInput {
            train: Tensor::zeros(0, own.test.cols()),
            labels: own.labels.map(|l| Labels {
                train: Tensor::zeros(0, 1),
                test: l.test,
            }),
            test: own.test,
        }),
        fingerprint: data.fingerprint,
    };
    let labels = data.input.as_ref().and_then(|i| i.labels.as_ref()).map(|l| l.test.clone());
    let fingerprint = data.fingerprint.clone();
    let (role, output, _) = finished(connect_and_run(net, cfg, data, Some(archive.clone()))?)?;
    if let (Some(scores), Some(labels)) = (output.test_scores, labels) {
        report_scores(cfg, &fingerprint, &scores, &labels, out)?;
    }
    info!("{role}: done");
    Ok(())
}
