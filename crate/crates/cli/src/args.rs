use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use p2n2::RoleId;

#[derive(Debug, Parser)]
#[command(name = "p2n2", version, about = "Three-party split neural-network training over secret shares")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a split model, locally or as one networked role.
    Train(TrainArgs),
    /// Score the test fold with a saved checkpoint.
    Eval(EvalArgs),
    /// Reconstruction attack against undefended and defended models.
    AttackDemo(AttackArgs),
    /// Timing sweeps over link rate, training-set size, or first-layer mode.
    Bench(BenchArgs),
    /// Write a synthetic stand-in dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Clone)]
pub struct SessionArgs {
    /// Dataset as `KIND` or `KIND:PATH` (kinds: fraud, distress, mnist).
    /// Without a path, P2N2_FRAUD_CSV / P2N2_DISTRESS_CSV / P2N2_MNIST_DIR
    /// are consulted, then the synthetic stand-in (fraud and distress only).
    #[arg(long, default_value = "fraud")]
    pub dataset: String,
    /// CSV schema file replacing the built-in one.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// `key = value` config file applied on top of the dataset preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub frac_bits: Option<u32>,
    /// Link rate limit in bits per second.
    #[arg(long)]
    pub throttle_bps: Option<f64>,
    /// Record wall-clock time in traces (makes them non-reproducible).
    #[arg(long)]
    pub timing: bool,
    /// Output directory.
    #[arg(long, env = "P2N2_OUT", default_value = "p2n2-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct NetArgs {
    /// Run all three roles in this process over loopback channels.
    #[arg(long, conflicts_with_all = ["role", "peers", "listen"])]
    pub local_sim: bool,
    /// The role this process plays in a networked session.
    #[arg(long, required_unless_present = "local_sim")]
    pub role: Option<RoleId>,
    /// `holder-a=HOST:PORT,holder-b=HOST:PORT,server=HOST:PORT`.
    #[arg(long, env = "P2N2_PEERS")]
    pub peers: Option<String>,
    /// Address to accept peer connections on (holder B and the server).
    #[arg(long, env = "P2N2_LISTEN")]
    pub listen: Option<String>,
    /// Per-session value shared by both holders that selects the dealer's
    /// triples. Must differ between sessions on the same config.
    #[arg(long, env = "P2N2_SESSION_SALT")]
    pub session_salt: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub net: NetArgs,
    /// Also train the plaintext network on the joined features.
    #[arg(long)]
    pub baseline: bool,
    /// Repetitions with seeds `seed, seed+1, ...` (local simulation only).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub repetitions: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub net: NetArgs,
    /// Checkpoint written by `train` (the full model, or this role's part).
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    /// Training pairs `(h1, x)` the attacker is given.
    #[arg(long, default_value_t = 1000)]
    pub leaked: usize,
    /// Test records reconstructed in the report.
    #[arg(long, default_value_t = 200)]
    pub report_rows: usize,
    #[arg(long, default_value_t = 10)]
    pub attack_epochs: usize,
    /// Cap on MNIST images read.
    #[arg(long, default_value_t = 2000)]
    pub limit: usize,
    /// Also sweep λ over `LO..HI`, one value per decade, on the same data.
    #[arg(long, value_name = "LO..HI")]
    pub sweep_lambda: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Vary {
    Bandwidth,
    Datasize,
    /// Secure against plaintext first layer on the same workload.
    Mode,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[arg(long, value_enum)]
    pub vary: Vary,
    /// Link rates in bits per second for the bandwidth sweep (`none` = unlimited).
    #[arg(long, value_delimiter = ',', default_value = "1e6,3e6,1e7,3e7,1e8,none")]
    pub rates: Vec<String>,
    /// Training-set fractions for the datasize sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    pub fractions: Vec<f64>,
    /// Training fraction used by the bandwidth and mode sweeps.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Fraud,
    Distress,
    Digits,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: SynthKind,
    /// CSV file (fraud, distress) or IDX directory (digits).
    #[arg(long)]
    pub out: PathBuf,
    /// Row count (fraud and digits).
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
