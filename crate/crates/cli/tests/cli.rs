use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn p2n2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2n2"))
        .args(args)
        .env_remove("P2N2_OUT")
        .env_remove("P2N2_PEERS")
        .env_remove("P2N2_LISTEN")
        .env_remove("P2N2_MNIST_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn fraud_csv(dir: &Path) -> String {
    let csv = dir.join("fraud.csv");
    ok(p2n2(&["synth", "fraud", "--rows", "1500", "--out", csv.to_str().unwrap()]));
    format!("fraud:{}", csv.display())
}

const SMALL: [&str; 4] = ["--set", "epochs=1", "--set", "hidden=4,4"];

#[test]
fn local_sim_train_is_reproducible_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fraud_csv(dir.path());
    let runs: Vec<_> = ["r1", "r2"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut args = vec!["train", "--local-sim", "--seed", "7", "--baseline", "--dataset", &ds];
            args.extend(SMALL);
            args.extend(["--out", out.to_str().unwrap()]);
            ok(p2n2(&args));
            out
        })
        .collect();
    for file in ["trace-seed7.tsv", "summary.tsv", "checkpoint-seed7.p2n2"] {
        assert_eq!(
            std::fs::read(runs[0].join(file)).unwrap(),
            std::fs::read(runs[1].join(file)).unwrap(),
            "{file}"
        );
    }
    let summary = read(&runs[0].join("summary.tsv"));
    assert!(summary.contains("# config_digest ") && summary.contains("# dataset "));

    let ckpt = runs[0].join("checkpoint-seed7.p2n2");
    let mut args = vec!["eval", "--local-sim", "--seed", "7", "--dataset", &ds];
    args.extend(SMALL);
    args.extend(["--checkpoint", ckpt.to_str().unwrap(), "--out", runs[0].to_str().unwrap()]);
    let stdout = ok(p2n2(&args));
    let test_auc = summary.lines().find(|l| l.starts_with("7\t")).unwrap().split('\t').nth(2).unwrap();
    let printed: f64 = stdout.trim().strip_prefix("test AUC ").unwrap().parse().unwrap();
    assert!((printed - test_auc.parse::<f64>().unwrap()).abs() < 1e-3, "{printed} vs {test_auc}");
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn three_processes_train_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fraud_csv(dir.path());
    let peers = format!(
        "holder-a=127.0.0.1:1,holder-b=127.0.0.1:{},server=127.0.0.1:{}",
        free_port(),
        free_port()
    );
    let spawn = |role: &str| {
        let out = dir.path().join(role);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_p2n2"));
        cmd.args(["train", "--role", role, "--session-salt", "3", "--dataset", &ds])
            .args(SMALL)
            .args(["--out", out.to_str().unwrap()])
            .env("P2N2_PEERS", &peers)
            .env_remove("P2N2_LISTEN")
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped());
        cmd.spawn().unwrap()
    };
    let children = [spawn("server"), spawn("holder-b"), spawn("holder-a")];
    for c in children {
        let out = c.wait_with_output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(dir.path().join("holder-a/trace.tsv").exists());
    for role in ["holder-a", "holder-b", "server"] {
        assert!(dir.path().join(role).join(format!("checkpoint-{role}.p2n2")).exists());
    }
    assert!(!dir.path().join("server/trace.tsv").exists());
}

#[test]
fn networked_holders_need_a_session_salt() {
    let out = p2n2(&[
        "train",
        "--role",
        "holder-a",
        "--peers",
        "holder-a=127.0.0.1:1,holder-b=127.0.0.1:2,server=127.0.0.1:3",
        "--out",
        std::env::temp_dir().join("p2n2-salt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--session-salt"));
}

#[test]
fn attack_demo_without_mnist_points_to_a_download() {
    let out = p2n2(&["attack-demo", "--dataset", "mnist"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("yann.lecun.com") && err.contains("synth digits"), "{err}");
}

#[test]
fn attack_demo_on_synthetic_digits_with_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let digits = dir.path().join("digits");
    ok(p2n2(&["synth", "digits", "--rows", "300", "--out", digits.to_str().unwrap()]));
    let out = dir.path().join("out");
    let stdout = ok(p2n2(&[
        "attack-demo",
        "--dataset",
        &format!("mnist:{}", digits.display()),
        "--set",
        "epochs=1",
        "--set",
        "defender_hidden=16",
        "--leaked",
        "150",
        "--report-rows",
        "20",
        "--attack-epochs",
        "2",
        "--sweep-lambda",
        "1e-5..1e-1",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("mse_ratio"));
    let sweep = read(&out.join("lambda-sweep.tsv"));
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 6, "{sweep}");
    assert!(out.join("recon-defended.p2n2").exists());
}

#[test]
fn bench_datasize_reports_a_fit() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fraud_csv(dir.path());
    let out = dir.path().join("bench");
    let stdout = ok(p2n2(&[
        "bench",
        "--vary",
        "datasize",
        "--dataset",
        &ds,
        "--set",
        "batch_size=500",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("# fit seconds ="));
    assert_eq!(read(&out.join("bench-datasize.tsv")).lines().filter(|l| !l.starts_with('#')).count(), 6);
}

#[test]
fn bad_flags_fail_with_a_diagnostic() {
    let out = p2n2(&["train", "--local-sim", "--set", "hidden=", "--out", std::env::temp_dir().join("p2n2-bad").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let out = p2n2(&["train", "--local-sim", "--role", "server"]);
    assert!(!out.status.success());
}
