use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed::SeedTree;

/// Disjoint, exhaustive train/test row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl EvalSplit {
    /// Seeded shuffle, then the first `round(n * ratio)` rows train.
    pub fn new(n: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("train ratio must be in (0, 1), got {ratio}")));
        }
        let cut = (n as f64 * ratio).round() as usize;
        if cut == 0 || cut == n {
            return Err(Error::Data(format!("{n} rows at ratio {ratio} leave an empty fold")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut SeedTree::new(seed).child("eval-split").rng());
        let test = idx.split_off(cut);
        Ok(EvalSplit {
            train: idx,
            test,
            ratio,
            seed,
        })
    }

    /// Keeps the leading `fraction` of the training rows; the test fold is unchanged.
    pub fn shrink_train(&self, fraction: f64) -> EvalSplit {
        let keep = ((self.train.len() as f64 * fraction).round() as usize).clamp(1, self.train.len());
        EvalSplit {
            train: self.train[..keep].to_vec(),
            ..self.clone()
        }
    }
}

/// Per-column z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns the statistics apply to; others pass through unchanged.
    pub active: Vec<bool>,
}

/// Standard deviations at or below this are treated as constant columns.
pub const CONSTANT_STD: f64 = 1e-12;

impl NormStats {
    pub fn fit(features: &Tensor, active: &[bool]) -> Self {
        let (n, d) = features.shape();
        let mut mean = vec![0.0; d];
        let mut std = vec![1.0; d];
        for j in (0..d).filter(|&j| active[j]) {
            let m = (0..n).map(|i| features.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (features.get(i, j) - m).powi(2)).sum::<f64>() / n as f64;
            mean[j] = m;
            std[j] = var.sqrt();
        }
        NormStats {
            mean,
            std,
            active: active.to_vec(),
        }
    }

    /// Constant columns map to zero.
    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.mean.len() {
            return Err(Error::shape(
                "NormStats::apply",
                format!("{} columns, stats for {}", features.cols(), self.mean.len()),
            ));
        }
        let d = features.cols();
        let mut out = features.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            if self.active[j] {
                *v = if self.std[j] > CONSTANT_STD {
                    (*v - self.mean[j]) / self.std[j]
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}

/// Train and test folds normalized with training statistics.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
    pub split: EvalSplit,
}

pub fn prepare(ds: &Dataset, split: &EvalSplit) -> Result<Prepared> {
    let mut train = ds.subset(&split.train);
    let mut test = ds.subset(&split.test);
    let stats = NormStats::fit(&train.features, &ds.numeric);
    train.features = stats.apply(&train.features)?;
    test.features = stats.apply(&test.features)?;
    Ok(Prepared {
        train,
        test,
        stats,
        split: split.clone(),
    })
}

/// Column ownership between the two holders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerticalSplit {
    pub columns_a: Vec<usize>,
    pub columns_b: Vec<usize>,
}

impl VerticalSplit {
    pub fn new(columns_a: Vec<usize>, columns_b: Vec<usize>, d: usize) -> Result<Self> {
        let mut seen = vec![false; d];
        for &c in columns_a.iter().chain(&columns_b) {
            if c >= d {
                return Err(Error::Config(format!("column {c} out of range for {d} features")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!("column {c} assigned twice")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("column {missing} assigned to neither holder")));
        }
        if columns_a.is_empty() || columns_b.is_empty() {
            return Err(Error::Config("each holder needs at least one column".into()));
        }
        Ok(VerticalSplit { columns_a, columns_b })
    }

    /// A takes the first `ceil(d / 2)` columns.
    pub fn halves(d: usize) -> Result<Self> {
        let mid = d.div_ceil(2);
        Self::new((0..mid).collect(), (mid..d).collect(), d)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.columns_a.len(), self.columns_b.len())
    }
}

/// What each holder owns after a vertical split.
#[derive(Debug, Clone, PartialEq)]
pub struct HolderViews {
    pub features_a: Tensor,
    pub features_b: Tensor,
    /// Held by A only.
    pub labels: Tensor,
}

pub fn vertical_split(ds: &Dataset, spec: &VerticalSplit) -> Result<HolderViews> {
    VerticalSplit::new(spec.columns_a.clone(), spec.columns_b.clone(), ds.dim())?;
    Ok(HolderViews {
        features_a: ds.features.select_cols(&spec.columns_a),
        features_b: ds.features.select_cols(&spec.columns_b),
        labels: ds.labels_tensor(),
    })
}
