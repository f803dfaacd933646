use super::Tensor;
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor,
    /// Entries of ŷ that had to be clamped into `[eps, 1 - eps]`.
    pub clamped: usize,
}

/// Mean binary cross-entropy and its gradient with respect to ŷ.
pub fn logistic_loss(y_hat: &Tensor, y: &Tensor) -> Result<LossOutput> {
    if y_hat.shape() != y.shape() {
        return Err(Error::shape(
            "logistic_loss",
            format!("{:?} vs {:?}", y_hat.shape(), y.shape()),
        ));
    }
    let n = y_hat.len().max(1) as f64;
    let mut clamped = 0;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y_hat.len());
    for (&p, &t) in y_hat.data().iter().zip(y.data()) {
        let q = if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
            clamped += 1;
            p.clamp(PROB_EPS, 1.0 - PROB_EPS)
        } else {
            p
        };
        loss -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        grad.push((q - t) / (q * (1.0 - q)) / n);
    }
    if clamped > 0 {
        log::debug!("logistic_loss clamped {clamped} predictions");
    }
    Ok(LossOutput {
        loss: loss / n,
        grad: Tensor::from_vec(y_hat.rows(), y_hat.cols(), grad)?,
        clamped,
    })
}

/// Mean squared error over all entries; gradient with respect to `x_hat`.
pub fn mse_distance(x: &Tensor, x_hat: &Tensor) -> Result<(f64, Tensor)> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(
            "mse_distance",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    let n = x.len().max(1) as f64;
    let diff = x_hat.sub(x)?;
    let d = diff.sq_norm() / n;
    Ok((d, diff.scale(2.0 / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn half_probability_costs_ln2() {
        let out = logistic_loss(&Tensor::filled(1, 1, 0.5), &Tensor::filled(1, 1, 1.0)).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn exact_predictions_clamp() {
        let y = Tensor::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let out = logistic_loss(&y, &y).unwrap();
        assert!(out.loss <= 1e-11);
        assert_eq!(out.clamped, 2);
        assert!(out.grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..0.95)).collect();
        let t: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        let y = Tensor::from_vec(6, 1, t).unwrap();
        let yh = Tensor::from_vec(6, 1, p).unwrap();
        let out = logistic_loss(&yh, &y).unwrap();
        let eps = 1e-6;
        for i in 0..6 {
            let (mut hi, mut lo) = (yh.clone(), yh.clone());
            hi.data_mut()[i] += eps;
            lo.data_mut()[i] -= eps;
            let fd = (logistic_loss(&hi, &y).unwrap().loss - logistic_loss(&lo, &y).unwrap().loss)
                / (2.0 * eps);
            assert!((fd - out.grad.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn mse_examples() {
        let x = Tensor::from_vec(1, 2, vec![0.3, -1.0]).unwrap();
        assert_eq!(mse_distance(&x, &x).unwrap().0, 0.0);
        let (d, g) = mse_distance(&Tensor::zeros(1, 1), &Tensor::filled(1, 1, 2.0)).unwrap();
        assert_eq!(d, 4.0);
        assert_eq!(g.data(), &[4.0]);
        assert!(mse_distance(&x, &Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = Tensor::from_vec(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let xh = Tensor::from_vec(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, g) = mse_distance(&x, &xh).unwrap();
        let eps = 1e-6;
        for i in 0..9 {
            let (mut hi, mut lo) = (xh.clone(), xh.clone());
            hi.data_mut()[i] += eps;
            lo.data_mut()[i] -= eps;
            let fd = (mse_distance(&x, &hi).unwrap().0 - mse_distance(&x, &lo).unwrap().0) / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }
}
