//! Experiment drivers shared by the CLI and the acceptance suite: dataset
//! presets, seed repetitions, timing sweeps, the λ sweep and the
//! reconstruction-attack demo. Every table they emit carries the config
//! digest and dataset fingerprint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::config::{FirstLayerMode, SessionConfig};
use crate::data::{load_csv, load_csv_bytes, load_mnist, prepare, synth, Dataset, EvalSplit, Schema, VerticalSplit};
use crate::defender::{recovery_report, train_attacker, AttackConfig, RecoveryReport};
use crate::error::{Error, Result};
use crate::nn::{Activation, OptimizerKind, Tensor};
use crate::protocol::{finish, run_local, train_baseline, train_local, LocalSim, ModelPartition, RunOptions, SplitData};
use crate::transport::ThrottleSpec;

pub const FRAUD_ENV: &str = "P2N2_FRAUD_CSV";
pub const DISTRESS_ENV: &str = "P2N2_DISTRESS_CSV";
pub const MNIST_ENV: &str = "P2N2_MNIST_DIR";
/// Rows of the synthetic fraud stand-in.
pub const FRAUD_SYNTH_ROWS: usize = 20_000;
pub const TRAIN_RATIO: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Fraud,
    Distress,
    Mnist,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fraud" => Ok(DatasetKind::Fraud),
            "distress" => Ok(DatasetKind::Distress),
            "mnist" => Ok(DatasetKind::Mnist),
            _ => Err(Error::Config(format!("unknown dataset `{s}` (fraud, distress, mnist)"))),
        }
    }
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Fraud => "fraud",
            DatasetKind::Distress => "distress",
            DatasetKind::Mnist => "mnist",
        }
    }

    pub fn env_var(self) -> &'static str {
        match self {
            DatasetKind::Fraud => FRAUD_ENV,
            DatasetKind::Distress => DISTRESS_ENV,
            DatasetKind::Mnist => MNIST_ENV,
        }
    }

    pub fn schema(self) -> Option<Schema> {
        let text = match self {
            DatasetKind::Fraud => synth::FRAUD_SCHEMA,
            DatasetKind::Distress => synth::DISTRESS_SCHEMA,
            DatasetKind::Mnist => return None,
        };
        Some(Schema::parse(text).expect("built-in schema parses"))
    }

    /// Tuned training settings for this dataset.
    pub fn preset(self) -> SessionConfig {
        let base = SessionConfig::default();
        match self {
            DatasetKind::Fraud => SessionConfig {
                learning_rate: 0.5,
                epochs: 5,
                ..base
            },
            DatasetKind::Distress => SessionConfig {
                hidden: vec![400, 16, 8],
                activations: vec![Activation::Sigmoid; 3],
                learning_rate: 0.5,
                epochs: 10,
                test_every: 23,
                ..base
            },
            DatasetKind::Mnist => SessionConfig {
                hidden: vec![64, 16],
                activations: vec![Activation::Sigmoid; 2],
                learning_rate: 0.01,
                optimizer: OptimizerKind::Adam,
                epochs: 3,
                lambda: 100.0,
                ..base
            },
        }
    }
}

/// Where a dataset comes from: an explicit path, the kind's environment
/// variable, or (fraud and distress only) the seeded synthetic stand-in.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic,
}

impl DataSource {
    pub fn resolve(kind: DatasetKind, explicit: Option<&Path>) -> Result<DataSource> {
        if let Some(p) = explicit {
            return Ok(DataSource::File(p.to_path_buf()));
        }
        if let Some(p) = std::env::var_os(kind.env_var()) {
            return Ok(DataSource::File(PathBuf::from(p)));
        }
        match kind {
            DatasetKind::Mnist => Err(Error::Data(format!(
                "no MNIST directory given; pass --dataset <dir> or set {MNIST_ENV} to a directory holding \
                 train-images-idx3-ubyte and train-labels-idx1-ubyte (http://yann.lecun.com/exdb/mnist/), \
                 or run `p2n2 synth digits --out <dir>` for a synthetic stand-in"
            ))),
            _ => Ok(DataSource::Synthetic),
        }
    }
}

/// Loads `kind` from `source`. `schema` overrides the built-in one for CSVs;
/// `limit` caps MNIST rows.
pub fn load_dataset(kind: DatasetKind, source: &DataSource, schema: Option<&Schema>, limit: Option<usize>) -> Result<Dataset> {
    let schema = schema.cloned().or_else(|| kind.schema());
    match (kind, source) {
        (DatasetKind::Mnist, DataSource::File(dir)) => load_mnist(dir, limit),
        (DatasetKind::Mnist, DataSource::Synthetic) => DataSource::resolve(kind, None).map(|_| unreachable!()),
        (_, DataSource::File(p)) => load_csv(p, schema.as_ref().expect("csv datasets have schemas")),
        (DatasetKind::Fraud, DataSource::Synthetic) => load_csv_bytes(
            synth::fraud_csv(FRAUD_SYNTH_ROWS, 0).as_bytes(),
            schema.as_ref().expect("schema"),
        ),
        (DatasetKind::Distress, DataSource::Synthetic) => {
            load_csv_bytes(synth::distress_csv(0).as_bytes(), schema.as_ref().expect("schema"))
        }
    }
}

/// Seeded train/test split, normalization and the default vertical split.
pub fn split_data(ds: &Dataset, seed: u64, train_fraction: f64) -> Result<SplitData> {
    let mut split = EvalSplit::new(ds.len(), TRAIN_RATIO, seed)?;
    if train_fraction < 1.0 {
        split = split.shrink_train(train_fraction);
    }
    let prep = prepare(ds, &split)?;
    let mut data = SplitData::from_prepared(&prep, &VerticalSplit::halves(ds.dim())?)?;
    data.fingerprint = ds.fingerprint_hex();
    Ok(data)
}

/// One repetition of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub baseline_train_auc: Option<f64>,
    pub baseline_test_auc: Option<f64>,
    pub first_test_loss: Option<f64>,
    pub last_test_loss: Option<f64>,
}

pub struct Repetition {
    pub summary: RunSummary,
    pub trace: crate::protocol::TrainingTrace,
    pub partition: ModelPartition,
}

/// Trains under `seed` (used for the fold split, the init and the batch
/// order), optionally co-training the plaintext baseline.
pub fn run_once(cfg: &SessionConfig, ds: &Dataset, seed: u64, baseline: bool) -> Result<Repetition> {
    let cfg = SessionConfig { seed, ..cfg.clone() };
    let data = split_data(ds, seed, 1.0)?;
    let out = train_local(&cfg, &data)?;
    let base = if baseline {
        Some(train_baseline(&cfg, &data)?)
    } else {
        None
    };
    let tl = out.trace.test_losses();
    Ok(Repetition {
        summary: RunSummary {
            seed,
            train_auc: out.train_auc,
            test_auc: out.test_auc,
            baseline_train_auc: base.as_ref().and_then(|b| b.train_auc),
            baseline_test_auc: base.as_ref().and_then(|b| b.test_auc),
            first_test_loss: tl.first().map(|t| t.1),
            last_test_loss: tl.last().map(|t| t.1),
        },
        trace: out.trace,
        partition: out.partition,
    })
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Line-oriented metric table with provenance headers.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub title: String,
    pub config_digest: String,
    pub dataset: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl MetricTable {
    pub fn new(title: &str, cfg: &SessionConfig, dataset: &str, columns: &[&str]) -> Self {
        MetricTable {
            title: title.into(),
            config_digest: cfg.digest_hex(),
            dataset: dataset.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = format!("# p2n2 {}\n", self.title);
        let _ = writeln!(s, "# config_digest {}", self.config_digest);
        let _ = writeln!(s, "# dataset {}", self.dataset);
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s.push_str(&self.columns.join("\t"));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join("\t"));
            s.push('\n');
        }
        s
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

/// Least-squares line through `(x, y)` with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LineFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    LineFit {
        slope,
        intercept,
        r2: if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub x: f64,
    pub seconds: f64,
    pub bytes: u64,
}

/// Batch size used by the timing sweeps unless the config overrides it.
pub const BENCH_BATCH: usize = 5000;

/// One timed training session, without periodic or final evaluation.
pub fn timed_run(cfg: &SessionConfig, data: &SplitData) -> Result<SweepPoint> {
    let cfg = SessionConfig {
        test_every: usize::MAX,
        ..cfg.clone()
    };
    let sim = LocalSim {
        options: RunOptions {
            skip_final_eval: true,
            ..Default::default()
        },
        ..Default::default()
    };
    let t = Instant::now();
    let out = run_local(&cfg, data, &sim)?;
    let seconds = t.elapsed().as_secs_f64();
    let bytes = out.stats().total_bytes();
    finish(&cfg, data, out)?;
    Ok(SweepPoint { x: 0.0, seconds, bytes })
}

/// Training time against the fraction of training rows kept.
pub fn datasize_sweep(cfg: &SessionConfig, ds: &Dataset, fractions: &[f64]) -> Result<Vec<SweepPoint>> {
    fractions
        .iter()
        .map(|&f| {
            let data = split_data(ds, cfg.seed, f)?;
            Ok(SweepPoint { x: f, ..timed_run(cfg, &data)? })
        })
        .collect()
}

/// Training time against link rate in bits per second (`None` = unlimited).
pub fn bandwidth_sweep(cfg: &SessionConfig, data: &SplitData, rates: &[Option<f64>]) -> Result<Vec<SweepPoint>> {
    rates
        .iter()
        .map(|&r| {
            let cfg = SessionConfig {
                throttle: ThrottleSpec::from_option(r)?,
                ..cfg.clone()
            };
            Ok(SweepPoint {
                x: r.unwrap_or(f64::INFINITY),
                ..timed_run(&cfg, data)?
            })
        })
        .collect()
}

/// Secure and plaintext-first-layer times on the same workload.
pub fn secure_vs_plaintext(cfg: &SessionConfig, data: &SplitData) -> Result<(SweepPoint, SweepPoint)> {
    let secure = timed_run(
        &SessionConfig {
            first_layer: FirstLayerMode::Secure,
            ..cfg.clone()
        },
        data,
    )?;
    let plain = timed_run(
        &SessionConfig {
            first_layer: FirstLayerMode::Plaintext,
            ..cfg.clone()
        },
        data,
    )?;
    Ok((secure, plain))
}

/// Test AUC of the split model for each λ.
pub fn lambda_sweep(cfg: &SessionConfig, data: &SplitData, lambdas: &[f64]) -> Result<Vec<(f64, Option<f64>)>> {
    lambdas
        .iter()
        .map(|&l| Ok((l, train_local(&SessionConfig { lambda: l, ..cfg.clone() }, data)?.test_auc)))
        .collect()
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| {
            let e = a + (b - a) * i as f64 / (n - 1) as f64;
            let r = 10f64.powf(e);
            // Snap to the nearest value with few significant digits so decades print exactly.
            let p = 10f64.powi(e.floor() as i32);
            (r / p * 1e6).round() / 1e6 * p
        })
        .collect()
}

/// Parses `lo..hi` into one value per decade.
pub fn parse_decades(spec: &str) -> Result<Vec<f64>> {
    let (lo, hi) = spec
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("expected `lo..hi`, got `{spec}`")))?;
    let lo: f64 = lo.trim().parse().map_err(|_| Error::Config(format!("bad bound `{lo}`")))?;
    let hi: f64 = hi.trim().parse().map_err(|_| Error::Config(format!("bad bound `{hi}`")))?;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("need 0 < lo <= hi, got {lo}..{hi}")));
    }
    let n = (hi / lo).log10().round() as usize + 1;
    Ok(log_space(lo, hi, n))
}

/// Reconstruction attack against one trained model.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub lambda: f64,
    pub test_auc: Option<f64>,
    pub attacker_train_mse: f64,
    pub report: RecoveryReport,
}

#[derive(Debug, Clone)]
pub struct AttackDemo {
    pub undefended: AttackOutcome,
    pub defended: AttackOutcome,
}

impl AttackDemo {
    pub fn mse_ratio(&self) -> f64 {
        self.defended.report.mean_mse() / self.undefended.report.mean_mse()
    }
}

/// The first hidden layer the server observes for `rows` of both holders.
fn exposed_hidden(p: &ModelPartition, x_a: &Tensor, x_b: &Tensor) -> Result<Tensor> {
    Ok(p.forward(x_a, x_b)?.h1)
}

/// Trains at `lambda`, then lets the server fit an attacker on `leaked`
/// training pairs `(h1, X)` and reconstruct the test rows' full features.
pub fn attack_once(cfg: &SessionConfig, data: &SplitData, lambda: f64, leaked: usize, attack: &AttackConfig, report_rows: usize) -> Result<AttackOutcome> {
    let cfg = SessionConfig { lambda, ..cfg.clone() };
    let out = train_local(&cfg, data)?;
    let n = leaked.min(data.n_train());
    let (xa, xb) = (data.a.train.slice_rows(0, n), data.b.train.slice_rows(0, n));
    let h = exposed_hidden(&out.partition, &xa, &xb)?;
    let attacker = train_attacker(&h, &xa.hconcat(&xb)?, attack)?;
    let m = report_rows.min(data.n_test());
    let (ta, tb) = (data.a.test.slice_rows(0, m), data.b.test.slice_rows(0, m));
    let report = recovery_report(&attacker, &exposed_hidden(&out.partition, &ta, &tb)?, &ta.hconcat(&tb)?)?;
    Ok(AttackOutcome {
        lambda,
        test_auc: out.test_auc,
        attacker_train_mse: attacker.train_mse,
        report,
    })
}

pub fn attack_demo(cfg: &SessionConfig, data: &SplitData, lambda: f64, leaked: usize, attack: &AttackConfig, report_rows: usize) -> Result<AttackDemo> {
    Ok(AttackDemo {
        undefended: attack_once(cfg, data, 0.0, leaked, attack, report_rows)?,
        defended: attack_once(cfg, data, lambda, leaked, attack, report_rows)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_and_decades() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        assert_eq!(parse_decades("1e-5..1e-1").unwrap(), vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1]);
        assert!(parse_decades("1..0.1").is_err());
    }

    #[test]
    fn mnist_needs_a_source() {
        let err = DataSource::resolve(DatasetKind::Mnist, None);
        if std::env::var_os(MNIST_ENV).is_none() {
            assert!(err.unwrap_err().to_string().contains("yann.lecun.com"));
        }
    }
}
