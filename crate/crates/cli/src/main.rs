mod args;
mod net;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;
use log::info;
use p2n2::checkpoint::TensorArchive;
use p2n2::config::FirstLayerMode;
use p2n2::data::{auc, synth, Dataset, Schema};
use p2n2::defender::AttackConfig;
use p2n2::experiment::{
    attack_demo, bandwidth_sweep, datasize_sweep, fmt_opt, lambda_sweep, linear_fit, load_dataset, mean,
    parse_decades, run_once, split_data, timed_run, DataSource, DatasetKind, MetricTable, BENCH_BATCH,
};
use p2n2::nn::Tensor;
use p2n2::protocol::{predict_local, train_baseline, ModelPartition};
use p2n2::transport::ThrottleSpec;
use p2n2::SessionConfig;

use args::{AttackArgs, BenchArgs, Cli, Command, EvalArgs, SessionArgs, SynthArgs, SynthKind, TrainArgs, Vary};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::AttackDemo(a) => attack(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth_cmd(a),
    };
    if let Err(e) = result {
        eprintln!("p2n2: {e:#}");
        std::process::exit(1);
    }
}

/// A dataset selection with its kind and where its rows come from.
pub(crate) struct Input {
    kind: DatasetKind,
    source: DataSource,
    schema: Option<Schema>,
}

impl Input {
    fn resolve(s: &SessionArgs) -> Result<Input> {
        let (kind, path) = match s.dataset.split_once(':') {
            Some((k, p)) => (k.parse::<DatasetKind>()?, Some(PathBuf::from(p))),
            None => (s.dataset.parse::<DatasetKind>()?, None),
        };
        let schema = match &s.schema {
            Some(p) => Some(Schema::parse(
                &fs::read_to_string(p).with_context(|| format!("reading schema {}", p.display()))?,
            )?),
            None => None,
        };
        Ok(Input {
            kind,
            source: DataSource::resolve(kind, path.as_deref())?,
            schema,
        })
    }

    pub(crate) fn load(&self, limit: Option<usize>) -> Result<Dataset> {
        let ds = load_dataset(self.kind, &self.source, self.schema.as_ref(), limit)?;
        info!(
            "{} dataset: {} rows, {} features ({})",
            self.kind.name(),
            ds.len(),
            ds.dim(),
            match &self.source {
                DataSource::File(p) => p.display().to_string(),
                DataSource::Synthetic => "synthetic stand-in".into(),
            }
        );
        Ok(ds)
    }
}

/// Preset, then `base` overrides, then the config file, `--set`, and flags.
fn session_config(s: &SessionArgs, kind: DatasetKind, base: impl FnOnce(&mut SessionConfig)) -> Result<SessionConfig> {
    let mut cfg = kind.preset();
    base(&mut cfg);
    if let Some(p) = &s.config {
        cfg.apply_text(&fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?)?;
    }
    for kv in &s.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    if let Some(l) = s.lambda {
        cfg.lambda = l;
    }
    if let Some(f) = s.frac_bits {
        cfg.frac_bits = f;
    }
    if s.throttle_bps.is_some() {
        cfg.throttle = ThrottleSpec::from_option(s.throttle_bps)?;
    }
    cfg.timing |= s.timing;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(s: &SessionArgs) -> Result<&Path> {
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    Ok(&s.out)
}

pub(crate) fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

const SUMMARY_COLUMNS: [&str; 7] = [
    "seed",
    "train_auc",
    "test_auc",
    "baseline_train_auc",
    "baseline_test_auc",
    "first_test_loss",
    "last_test_loss",
];

fn train(a: TrainArgs) -> Result<()> {
    let input = Input::resolve(&a.session)?;
    let cfg = session_config(&a.session, input.kind, |_| {})?;
    let out = out_dir(&a.session)?;
    write(out.join("config.txt"), &cfg.canonical())?;
    if !a.net.local_sim {
        if a.repetitions > 1 || a.baseline {
            bail!("--repetitions and --baseline need --local-sim");
        }
        let data = net::holder_data(&a.net, &input, &cfg)?;
        return net::train(&a.net, &cfg, data, out);
    }
    let ds = input.load(None)?;

    let mut table = MetricTable::new("train summary", &cfg, &ds.fingerprint_hex(), &SUMMARY_COLUMNS);
    let mut runs = Vec::new();
    for seed in cfg.seed..cfg.seed + a.repetitions {
        let t = Instant::now();
        let rep = run_once(&cfg, &ds, seed, a.baseline)?;
        let s = &rep.summary;
        info!(
            "seed {seed}: test AUC {} (baseline {}) in {:.1}s",
            fmt_opt(s.test_auc),
            fmt_opt(s.baseline_test_auc),
            t.elapsed().as_secs_f64()
        );
        rep.trace.save(&out.join(format!("trace-seed{seed}.tsv")))?;
        rep.partition.to_archive().save(&out.join(format!("checkpoint-seed{seed}.p2n2")))?;
        table.push(vec![
            seed.to_string(),
            fmt_opt(s.train_auc),
            fmt_opt(s.test_auc),
            fmt_opt(s.baseline_train_auc),
            fmt_opt(s.baseline_test_auc),
            fmt_opt(s.first_test_loss),
            fmt_opt(s.last_test_loss),
        ]);
        runs.push(rep.summary);
    }
    let avg = |f: fn(&p2n2::experiment::RunSummary) -> Option<f64>| mean(runs.iter().filter_map(f));
    table.push(vec![
        "mean".into(),
        fmt_opt(avg(|r| r.train_auc)),
        fmt_opt(avg(|r| r.test_auc)),
        fmt_opt(avg(|r| r.baseline_train_auc)),
        fmt_opt(avg(|r| r.baseline_test_auc)),
        fmt_opt(avg(|r| r.first_test_loss)),
        fmt_opt(avg(|r| r.last_test_loss)),
    ]);
    let text = table.render();
    print!("{text}");
    write(out.join("summary.tsv"), &text)
}

fn eval(a: EvalArgs) -> Result<()> {
    let input = Input::resolve(&a.session)?;
    let cfg = session_config(&a.session, input.kind, |_| {})?;
    let out = out_dir(&a.session)?;
    let archive = TensorArchive::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if !a.net.local_sim {
        let data = net::holder_data(&a.net, &input, &cfg)?;
        return net::eval(&a.net, &cfg, data, &archive, out);
    }
    let ds = input.load(None)?;
    let data = split_data(&ds, cfg.seed, 1.0)?;
    let partition = ModelPartition::from_archive(&cfg, data.dims(), &archive)?;
    let scores = predict_local(&cfg, &partition, &data.a.test, &data.b.test)?;
    report_scores(&cfg, &ds.fingerprint_hex(), &scores, &data.labels().test, out)
}

/// Writes per-row test scores and prints the AUC.
pub(crate) fn report_scores(cfg: &SessionConfig, fingerprint: &str, scores: &Tensor, labels: &Tensor, out: &Path) -> Result<()> {
    let mut table = MetricTable::new("test scores", cfg, fingerprint, &["row", "score", "label"]);
    for (i, (s, y)) in scores.data().iter().zip(labels.data()).enumerate() {
        table.push(vec![i.to_string(), format!("{s:.9}"), format!("{y}")]);
    }
    let auc = auc(scores.data(), labels.data()).ok();
    table.notes.push(format!("test_auc {}", fmt_opt(auc)));
    println!("test AUC {}", fmt_opt(auc));
    write(out.join("scores.tsv"), &table.render())
}

fn attack(a: AttackArgs) -> Result<()> {
    let input = Input::resolve(&a.session)?;
    let cfg = session_config(&a.session, input.kind, |_| {})?;
    let ds = input.load(Some(a.limit))?;
    let out = out_dir(&a.session)?;
    let data = split_data(&ds, cfg.seed, 1.0)?;
    let attack = AttackConfig {
        epochs: a.attack_epochs,
        seed: cfg.seed,
        ..AttackConfig::default()
    };
    let demo = attack_demo(&cfg, &data, cfg.lambda, a.leaked, &attack, a.report_rows)?;
    let fp = ds.fingerprint_hex();
    let mut table = MetricTable::new(
        "attack demo",
        &cfg,
        &fp,
        &["model", "lambda", "test_auc", "attacker_train_mse", "recovery_mse"],
    );
    for (name, o) in [("undefended", &demo.undefended), ("defended", &demo.defended)] {
        table.push(vec![
            name.into(),
            format!("{:e}", o.lambda),
            fmt_opt(o.test_auc),
            format!("{:.6}", o.attacker_train_mse),
            format!("{:.6}", o.report.mean_mse()),
        ]);
        o.report.dump().save(&out.join(format!("recon-{name}.p2n2")))?;
    }
    table.notes.push(format!("mse_ratio {:.4}", demo.mse_ratio()));
    let text = table.render();
    print!("{text}");
    write(out.join("attack.tsv"), &text)?;

    if let Some(spec) = &a.sweep_lambda {
        let mut sweep = MetricTable::new("lambda sweep", &cfg, &fp, &["lambda", "test_auc"]);
        for (l, auc) in lambda_sweep(&cfg, &data, &parse_decades(spec)?)? {
            sweep.push(vec![format!("{l:e}"), fmt_opt(auc)]);
        }
        let text = sweep.render();
        print!("{text}");
        write(out.join("lambda-sweep.tsv"), &text)?;
    }
    Ok(())
}

fn parse_rate(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "none" | "unlimited" | "inf" => Ok(None),
        v => Ok(Some(v.parse().with_context(|| format!("bad rate `{v}`"))?)),
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let input = Input::resolve(&a.session)?;
    let cfg = session_config(&a.session, input.kind, |c| {
        c.batch_size = BENCH_BATCH;
        c.epochs = 1;
    })?;
    let ds = input.load(None)?;
    let out = out_dir(&a.session)?;
    let fp = ds.fingerprint_hex();
    let (name, table) = match a.vary {
        Vary::Datasize => {
            let points = datasize_sweep(&cfg, &ds, &a.fractions)?;
            let mut t = MetricTable::new("datasize sweep", &cfg, &fp, &["fraction", "seconds", "bytes"]);
            for p in &points {
                t.push(vec![format!("{}", p.x), format!("{:.4}", p.seconds), p.bytes.to_string()]);
            }
            let secs: Vec<f64> = points.iter().map(|p| p.seconds).collect();
            let fit = linear_fit(&a.fractions, &secs);
            t.notes.push(format!(
                "fit seconds = {:.4} * fraction + {:.4}, r2 {:.4}",
                fit.slope, fit.intercept, fit.r2
            ));
            ("datasize", t)
        }
        Vary::Bandwidth => {
            let rates = a.rates.iter().map(|r| parse_rate(r)).collect::<Result<Vec<_>>>()?;
            let data = split_data(&ds, cfg.seed, a.fraction)?;
            let mut t = MetricTable::new("bandwidth sweep", &cfg, &fp, &["bits_per_second", "seconds", "bytes", "seconds_x_rate"]);
            for p in bandwidth_sweep(&cfg, &data, &rates)? {
                let product = if p.x.is_finite() { format!("{:.4e}", p.seconds * p.x) } else { "-".into() };
                let rate = if p.x.is_finite() { format!("{:e}", p.x) } else { "unlimited".into() };
                t.push(vec![rate, format!("{:.4}", p.seconds), p.bytes.to_string(), product]);
            }
            ("bandwidth", t)
        }
        Vary::Mode => {
            let data = split_data(&ds, cfg.seed, a.fraction)?;
            let mut t = MetricTable::new("first-layer mode", &cfg, &fp, &["run", "seconds", "bytes"]);
            for mode in [FirstLayerMode::Secure, FirstLayerMode::Plaintext] {
                let p = timed_run(&SessionConfig { first_layer: mode, ..cfg.clone() }, &data)?;
                t.push(vec![format!("split-{}", mode.name()), format!("{:.4}", p.seconds), p.bytes.to_string()]);
            }
            let start = Instant::now();
            train_baseline(
                &SessionConfig {
                    test_every: usize::MAX,
                    eval_train: false,
                    ..cfg.clone()
                },
                &data,
            )?;
            t.push(vec!["baseline".into(), format!("{:.4}", start.elapsed().as_secs_f64()), "0".into()]);
            ("mode", t)
        }
    };
    let text = table.render();
    print!("{text}");
    write(out.join(format!("bench-{name}.tsv")), &text)
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    match a.kind {
        SynthKind::Fraud => fs::write(&a.out, synth::fraud_csv(a.rows.unwrap_or(20_000), a.seed))?,
        SynthKind::Distress => {
            if a.rows.is_some() {
                bail!("the distress stand-in has a fixed shape; drop --rows");
            }
            fs::write(&a.out, synth::distress_csv(a.seed))?
        }
        SynthKind::Digits => synth::write_digits(&a.out, a.rows.unwrap_or(2000), a.seed)?,
    }
    info!("wrote {}", a.out.display());
    Ok(())
}

