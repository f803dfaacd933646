use rand::seq::SliceRandom;

use crate::config::SessionConfig;
use crate::seed::SeedTree;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainStep {
    pub iteration: usize,
    pub epoch: usize,
    /// Training-fold row indices of this mini-batch.
    pub rows: Vec<usize>,
    /// Whether the periodic test loss is computed after this step.
    pub test_loss: bool,
}

/// The run plan every role derives independently from the shared config and
/// fold sizes; roles never exchange it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub steps: Vec<TrainStep>,
    /// Test-fold chunks evaluated for the periodic test loss.
    pub test_loss_chunks: Vec<Vec<usize>>,
    pub final_train_chunks: Vec<Vec<usize>>,
    pub final_test_chunks: Vec<Vec<usize>>,
}

fn chunks(rows: std::ops::Range<usize>, size: usize) -> Vec<Vec<usize>> {
    rows.collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect()
}

impl Schedule {
    /// Per-epoch seeded shuffle of the training rows, cut into mini-batches
    /// (the last one may be short). Test loss after iterations `0, N, 2N, ...`.
    pub fn new(cfg: &SessionConfig, n_train: usize, n_test: usize) -> Schedule {
        let shuffle = SeedTree::new(cfg.seed).child("batch-order");
        let mut steps = Vec::new();
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n_train).collect();
            order.shuffle(&mut shuffle.child_idx("epoch", epoch as u64).rng());
            for rows in order.chunks(cfg.batch_size) {
                let iteration = steps.len();
                steps.push(TrainStep {
                    iteration,
                    epoch,
                    rows: rows.to_vec(),
                    test_loss: n_test > 0 && iteration % cfg.test_every == 0,
                });
            }
        }
        let loss_rows = if cfg.test_loss_rows == 0 {
            n_test
        } else {
            cfg.test_loss_rows.min(n_test)
        };
        Schedule {
            steps,
            test_loss_chunks: chunks(0..loss_rows, cfg.eval_batch),
            final_train_chunks: if cfg.eval_train {
                chunks(0..n_train, cfg.eval_batch)
            } else {
                Vec::new()
            },
            final_test_chunks: chunks(0..n_test, cfg.eval_batch),
        }
    }

    /// Truncates the run to its first `n` training steps.
    pub fn limit(mut self, n: usize) -> Schedule {
        self.steps.truncate(n);
        self
    }

    pub fn without_final_eval(mut self) -> Schedule {
        self.final_train_chunks.clear();
        self.final_test_chunks.clear();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_each_row_once_per_epoch() {
        let cfg = SessionConfig {
            batch_size: 4,
            epochs: 3,
            ..SessionConfig::default()
        };
        let s = Schedule::new(&cfg, 10, 5);
        assert_eq!(s.steps.len(), 9);
        for e in 0..3 {
            let mut rows: Vec<usize> = s.steps.iter().filter(|t| t.epoch == e).flat_map(|t| t.rows.clone()).collect();
            rows.sort_unstable();
            assert_eq!(rows, (0..10).collect::<Vec<_>>());
        }
        assert_ne!(s.steps[0].rows, s.steps[3].rows);
        assert_eq!(s.steps.iter().filter(|t| t.test_loss).count(), 1);
        assert_eq!(s, Schedule::new(&cfg, 10, 5));
    }
}
