use super::{Monolithic, ModelPartition, Schedule, SplitData};
use crate::config::SessionConfig;
use crate::data::auc;
use crate::error::{Error, Result};
use crate::nn::{logistic_loss, Tensor};

/// The plaintext network trained on the joined features, co-trained with
/// the split model over the same schedule and initialization.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub model: ModelPartition,
    pub losses: Vec<f64>,
    pub test_losses: Vec<(usize, f64)>,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub test_scores: Tensor,
}

fn scores_in_chunks(model: &ModelPartition, x_a: &Tensor, x_b: &Tensor, chunk: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(x_a.rows());
    let mut start = 0;
    while start < x_a.rows() {
        let end = (start + chunk).min(x_a.rows());
        let s = model.predict(&x_a.slice_rows(start, end), &x_b.slice_rows(start, end))?;
        out.extend_from_slice(s.data());
        start = end;
    }
    Tensor::from_vec(out.len(), 1, out)
}

pub fn train_baseline(cfg: &SessionConfig, data: &SplitData) -> Result<BaselineOutput> {
    let mut mono = Monolithic::new(cfg, data.dims())?;
    let sched = Schedule::new(cfg, data.n_train(), data.n_test());
    let labels = data
        .a
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("holder A input has no labels".into()))?;
    let mut losses = Vec::with_capacity(sched.steps.len());
    let mut test_losses = Vec::new();
    let loss_rows: usize = sched.test_loss_chunks.iter().map(Vec::len).sum();
    for step in &sched.steps {
        let s = mono.train_step(
            &data.a.train.select_rows(&step.rows),
            &data.b.train.select_rows(&step.rows),
            &labels.train.select_rows(&step.rows),
        )?;
        losses.push(s.loss);
        if step.test_loss {
            let p = scores_in_chunks(
                &mono.model,
                &data.a.test.slice_rows(0, loss_rows),
                &data.b.test.slice_rows(0, loss_rows),
                cfg.eval_batch,
            )?;
            test_losses.push((step.iteration, logistic_loss(&p, &labels.test.slice_rows(0, loss_rows))?.loss));
        }
    }
    let test_scores = scores_in_chunks(&mono.model, &data.a.test, &data.b.test, cfg.eval_batch)?;
    let train_auc = if cfg.eval_train {
        let s = scores_in_chunks(&mono.model, &data.a.train, &data.b.train, cfg.eval_batch)?;
        auc(s.data(), labels.train.data()).ok()
    } else {
        None
    };
    Ok(BaselineOutput {
        test_auc: auc(test_scores.data(), labels.test.data()).ok(),
        model: mono.model,
        losses,
        test_losses,
        train_auc,
        test_scores,
    })
}
