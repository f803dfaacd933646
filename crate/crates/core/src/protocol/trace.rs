//! Per-iteration training records and their text file format.
//!
//! ```text
//! # p2n2 trace v1
//! # config_digest <hex>
//! # dataset <hex>
//! iteration	train_loss	test_loss	d_A	d_B	elapsed_ms	bytes_tx
//! 0	6.931471805599453e-1	6.92e-1	-	-	-	5120
//! ```
//!
//! Tab-separated, one row per mini-batch step. `-` marks an absent value:
//! test loss outside the periodic schedule, defender distances when `λ = 0`,
//! and wall-clock time unless timing was requested (keeping default traces
//! byte-reproducible). `bytes_tx` is the cumulative wire traffic of all
//! three roles.

#![allow(clippy::tabs_in_doc_comments)]

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub d_a: Option<f64>,
    pub d_b: Option<f64>,
    pub elapsed_ms: Option<f64>,
    pub bytes_tx: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub config_digest: String,
    pub dataset: String,
    pub records: Vec<TraceRecord>,
}

pub const TRACE_COLUMNS: [&str; 7] = ["iteration", "train_loss", "test_loss", "d_A", "d_B", "elapsed_ms", "bytes_tx"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:e}"))
}

fn parse_opt(s: &str, line: u64) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("bad number `{s}`"),
    })
}

impl TrainingTrace {
    pub fn push(&mut self, r: TraceRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.iteration <= last.iteration {
                return Err(Error::Protocol(format!(
                    "trace iteration {} after {}",
                    r.iteration, last.iteration
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn test_losses(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.test_loss.map(|t| (r.iteration, t)))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# p2n2 trace v1\n");
        let _ = writeln!(s, "# config_digest {}", self.config_digest);
        let _ = writeln!(s, "# dataset {}", self.dataset);
        s.push_str(&TRACE_COLUMNS.join("\t"));
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{:e}\t{}\t{}\t{}\t{}\t{}",
                r.iteration,
                r.train_loss,
                opt(r.test_loss),
                opt(r.d_a),
                opt(r.d_b),
                r.elapsed_ms.map_or_else(|| "-".into(), |x| format!("{x:.3}")),
                r.bytes_tx
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = TrainingTrace::default();
        let mut header = false;
        for (i, line) in text.lines().enumerate() {
            let ln = i as u64 + 1;
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some(d) = rest.strip_prefix("config_digest ") {
                    t.config_digest = d.to_string();
                } else if let Some(d) = rest.strip_prefix("dataset ") {
                    t.dataset = d.to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if !header {
                if f != TRACE_COLUMNS {
                    return Err(Error::Parse {
                        line: ln,
                        message: "unexpected column header".into(),
                    });
                }
                header = true;
                continue;
            }
            if f.len() != TRACE_COLUMNS.len() {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected {} fields, got {}", TRACE_COLUMNS.len(), f.len()),
                });
            }
            let num = |s: &str| parse_opt(s, ln)?.ok_or_else(|| Error::Parse {
                line: ln,
                message: "required field is `-`".into(),
            });
            t.push(TraceRecord {
                iteration: num(f[0])? as usize,
                train_loss: num(f[1])?,
                test_loss: parse_opt(f[2], ln)?,
                d_a: parse_opt(f[3], ln)?,
                d_b: parse_opt(f[4], ln)?,
                elapsed_ms: parse_opt(f[5], ln)?,
                bytes_tx: num(f[6])? as u64,
            })?;
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
