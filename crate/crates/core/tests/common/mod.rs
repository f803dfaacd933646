#![allow(dead_code)]

use p2n2::data::{load_csv_bytes, prepare, synth, EvalSplit, Schema, VerticalSplit};
use p2n2::nn::Activation;
use p2n2::protocol::SplitData;
use p2n2::SessionConfig;

/// Synthetic card-fraud rows, normalized and split between the holders.
pub fn fraud(n: usize, seed: u64) -> SplitData {
    let schema = Schema::parse(synth::FRAUD_SCHEMA).unwrap();
    let ds = load_csv_bytes(synth::fraud_csv(n, seed).as_bytes(), &schema).unwrap();
    let prep = prepare(&ds, &EvalSplit::new(ds.len(), 0.8, seed).unwrap()).unwrap();
    SplitData::from_prepared(&prep, &VerticalSplit::halves(ds.dim()).unwrap()).unwrap()
}

/// A small, fast session over `fraud` data.
pub fn small_cfg() -> SessionConfig {
    SessionConfig {
        hidden: vec![6, 4],
        activations: vec![Activation::Sigmoid, Activation::Sigmoid],
        learning_rate: 0.05,
        batch_size: 32,
        epochs: 1,
        defender_hidden: vec![5],
        test_every: 4,
        ..SessionConfig::default()
    }
}
