//! Session configuration: a `key = value` text format with `#` comments.
//!
//! Every party hashes the canonical rendering of the training-relevant keys
//! ([`SessionConfig::canonical`]) and the handshake refuses to proceed unless
//! all three digests agree. Deployment keys (addresses, timeouts, throttling,
//! trace timing) are per-process and stay out of the digest.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, OptimizerKind};
use crate::ring::{FxConfig, DEFAULT_MAG_BOUND};
use crate::transport::{ConfigDigest, Endpoints, ThrottleSpec};

/// How the first layer is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstLayerMode {
    /// Beaver-triple protocol over fixed-point shares.
    Secure,
    /// Holders send their partial products in the clear. Test mode only.
    Plaintext,
}

impl FromStr for FirstLayerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "secure" => Ok(FirstLayerMode::Secure),
            "plaintext" => Ok(FirstLayerMode::Plaintext),
            _ => Err(Error::Config(format!("first_layer must be secure or plaintext, got `{s}`"))),
        }
    }
}

impl FirstLayerMode {
    pub fn name(self) -> &'static str {
        match self {
            FirstLayerMode::Secure => "secure",
            FirstLayerMode::Plaintext => "plaintext",
        }
    }
}

/// Direction in which defender networks move their own parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenderMode {
    /// Defenders minimize reconstruction error, acting as simulated attackers;
    /// the main model pushes that error up through `-λ d`.
    Attacker,
    /// Defenders maximize the reconstruction error with their own parameters.
    Literal,
}

impl FromStr for DefenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attacker" => Ok(DefenderMode::Attacker),
            "literal" => Ok(DefenderMode::Literal),
            _ => Err(Error::Config(format!("defender_mode must be attacker or literal, got `{s}`"))),
        }
    }
}

impl DefenderMode {
    pub fn name(self) -> &'static str {
        match self {
            DefenderMode::Attacker => "attacker",
            DefenderMode::Literal => "literal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    /// Widths of the hidden layers; the first is the jointly computed layer.
    pub hidden: Vec<usize>,
    /// One activation per hidden layer.
    pub activations: Vec<Activation>,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub frac_bits: u32,
    pub mag_bound: f64,
    /// Number of layers evaluated jointly by the holders (1 by default).
    pub cut_layer: usize,
    pub first_layer: FirstLayerMode,
    pub defender_hidden: Vec<usize>,
    pub defender_lr: f64,
    pub defender_optimizer: OptimizerKind,
    pub defender_mode: DefenderMode,
    /// Test loss is recorded every this many steps.
    pub test_every: usize,
    /// Cap on the test rows used for the periodic test loss (0 = all).
    pub test_loss_rows: usize,
    /// Rows per forward pass during evaluation.
    pub eval_batch: usize,
    /// Whether the final report includes training-set AUC.
    pub eval_train: bool,
    // Per-process keys below; not part of the digest.
    pub handshake_timeout: Duration,
    pub step_timeout: Duration,
    pub throttle: ThrottleSpec,
    pub timing: bool,
    pub listen: Option<String>,
    pub peers: Option<Endpoints>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            hidden: vec![8, 8],
            activations: vec![Activation::Sigmoid, Activation::Sigmoid],
            learning_rate: 0.001,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            lambda: 0.0,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            frac_bits: crate::ring::DEFAULT_FRAC_BITS,
            mag_bound: DEFAULT_MAG_BOUND,
            cut_layer: 1,
            first_layer: FirstLayerMode::Secure,
            defender_hidden: vec![512, 128],
            defender_lr: 0.01,
            defender_optimizer: OptimizerKind::Adam,
            defender_mode: DefenderMode::Attacker,
            test_every: 10,
            test_loss_rows: 0,
            eval_batch: 2048,
            eval_train: true,
            handshake_timeout: crate::transport::DEFAULT_HANDSHAKE_TIMEOUT,
            step_timeout: crate::transport::DEFAULT_STEP_TIMEOUT,
            throttle: ThrottleSpec::Unlimited,
            timing: false,
            listen: None,
            peers: None,
        }
    }
}

fn list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("{key}: `{s}`: {e}"))))
        .collect()
}

fn scalar<T: FromStr>(v: &str, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{key}: `{v}`: {e}")))
}

fn optional_f64(v: &str, key: &str) -> Result<Option<f64>> {
    match v {
        "" | "none" | "unlimited" => Ok(None),
        _ => scalar(v, key).map(Some),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl SessionConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "hidden" => self.hidden = list(v, key)?,
            "activations" => self.activations = list(v, key)?,
            "learning_rate" | "lr" => self.learning_rate = scalar(v, key)?,
            "optimizer" => self.optimizer = scalar(v, key)?,
            "clip_norm" => self.clip_norm = optional_f64(v, key)?,
            "lambda" => self.lambda = scalar(v, key)?,
            "batch_size" => self.batch_size = scalar(v, key)?,
            "epochs" => self.epochs = scalar(v, key)?,
            "seed" => self.seed = scalar(v, key)?,
            "frac_bits" => self.frac_bits = scalar(v, key)?,
            "mag_bound" => self.mag_bound = scalar(v, key)?,
            "cut_layer" => self.cut_layer = scalar(v, key)?,
            "first_layer" => self.first_layer = scalar(v, key)?,
            "defender_hidden" => self.defender_hidden = list(v, key)?,
            "defender_lr" => self.defender_lr = scalar(v, key)?,
            "defender_optimizer" => self.defender_optimizer = scalar(v, key)?,
            "defender_mode" => self.defender_mode = scalar(v, key)?,
            "test_every" => self.test_every = scalar(v, key)?,
            "test_loss_rows" => self.test_loss_rows = scalar(v, key)?,
            "eval_batch" => self.eval_batch = scalar(v, key)?,
            "eval_train" => self.eval_train = scalar(v, key)?,
            "handshake_timeout_ms" => self.handshake_timeout = Duration::from_millis(scalar(v, key)?),
            "step_timeout_ms" => self.step_timeout = Duration::from_millis(scalar(v, key)?),
            "throttle_bps" => self.throttle = ThrottleSpec::from_option(optional_f64(v, key)?)?,
            "timing" => self.timing = scalar(v, key)?,
            "listen" => self.listen = Some(v.to_string()),
            "peers" => self.peers = Some(Endpoints::parse(v)?),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SessionConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i as u64 + 1,
                message: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `P2N2_LISTEN` and `P2N2_PEERS` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("P2N2_LISTEN") {
            self.set("listen", &v)?;
        }
        if let Ok(v) = std::env::var("P2N2_PEERS") {
            self.set("peers", &v)?;
        }
        Ok(())
    }

    pub fn fx(&self) -> Result<FxConfig> {
        FxConfig::new(self.frac_bits, self.mag_bound)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be non-empty and positive: {:?}", self.hidden));
        }
        if self.activations.len() != self.hidden.len() {
            return bad(format!(
                "{} hidden layers need {} activations, got {}",
                self.hidden.len(),
                self.hidden.len(),
                self.activations.len()
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.defender_lr.is_finite() && self.defender_lr > 0.0) {
            return bad(format!("defender_lr must be positive, got {}", self.defender_lr));
        }
        if self.defender_hidden.contains(&0) {
            return bad("defender widths must be positive".into());
        }
        if self.test_every == 0 || self.eval_batch == 0 {
            return bad("test_every and eval_batch must be >= 1".into());
        }
        self.fx()?;
        if self.cut_layer == 0 || self.cut_layer > self.hidden.len() {
            return bad(format!(
                "cut_layer must be in 1..={}, got {}",
                self.hidden.len(),
                self.cut_layer
            ));
        }
        if self.cut_layer > 1 {
            if let Some((i, a)) = self.activations[..self.cut_layer - 1]
                .iter()
                .enumerate()
                .find(|(_, a)| **a != Activation::Linear)
            {
                return bad(format!(
                    "cut_layer {} puts layer {} under shares, but its activation is {a}; \
                     only linear activations can be evaluated on shares",
                    self.cut_layer,
                    i + 1
                ));
            }
            if self.lambda != 0.0 {
                return bad("defenders protect the first hidden layer and need cut_layer = 1".into());
            }
            if self.first_layer != FirstLayerMode::Secure {
                return bad("the plaintext first-layer mode supports cut_layer = 1 only".into());
            }
        }
        Ok(())
    }

    /// Canonical rendering of every training-relevant key, one per line in a
    /// fixed order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("hidden", join(&self.hidden));
        kv("activations", join(&self.activations));
        kv("learning_rate", format!("{:e}", self.learning_rate));
        kv("optimizer", self.optimizer.to_string());
        kv("clip_norm", self.clip_norm.map_or("none".into(), |c| format!("{c:e}")));
        kv("lambda", format!("{:e}", self.lambda));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("frac_bits", self.frac_bits.to_string());
        kv("mag_bound", format!("{:e}", self.mag_bound));
        kv("cut_layer", self.cut_layer.to_string());
        kv("first_layer", self.first_layer.name().into());
        kv("defender_hidden", join(&self.defender_hidden));
        kv("defender_lr", format!("{:e}", self.defender_lr));
        kv("defender_optimizer", self.defender_optimizer.to_string());
        kv("defender_mode", self.defender_mode.name().into());
        kv("test_every", self.test_every.to_string());
        kv("test_loss_rows", self.test_loss_rows.to_string());
        kv("eval_batch", self.eval_batch.to_string());
        kv("eval_train", self.eval_train.to_string());
        s
    }

    pub fn digest(&self) -> ConfigDigest {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let cfg = SessionConfig::parse(
            "# distress\nhidden = 400,16,8\nactivations = sigmoid,sigmoid,relu\nlr = 0.006\nlambda=1e-3 # weight\n",
        )
        .unwrap();
        assert_eq!(cfg.hidden, vec![400, 16, 8]);
        assert_eq!(cfg.activations[2], Activation::Relu);
        cfg.validate().unwrap();
        let again = SessionConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(again.canonical(), cfg.canonical());
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn digest_tracks_training_keys_only() {
        let a = SessionConfig::default();
        let mut b = a.clone();
        b.set("frac_bits", "12").unwrap();
        assert_ne!(a.digest(), b.digest());
        let mut c = a.clone();
        c.set("step_timeout_ms", "5").unwrap();
        c.set("throttle_bps", "1e6").unwrap();
        assert_eq!(a.digest(), c.digest());
    }

    #[test]
    fn errors_carry_line_numbers() {
        match SessionConfig::parse("seed = 1\nbogus = 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(SessionConfig::parse("seed\n").is_err());
    }

    #[test]
    fn validation() {
        let c = SessionConfig {
            lambda: -1.0,
            ..SessionConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = SessionConfig {
            cut_layer: 2,
            ..SessionConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("linear"), "{msg}");
        c.activations[0] = Activation::Linear;
        c.validate().unwrap();
        c.cut_layer = 3;
        assert!(c.validate().is_err());
    }
}
