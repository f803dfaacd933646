use super::{dense_backward, dense_forward, Activation, DenseCache, DenseGrads, DenseParams, Tensor};
use crate::error::{Error, Result};
use crate::seed::SeedTree;

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(DenseParams, Activation)>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<DenseCache>,
}

impl Mlp {
    /// `dims` lists every width from input to output; `acts` has one entry per layer.
    pub fn init(dims: &[usize], acts: &[Activation], seeds: &SeedTree) -> Result<Self> {
        if dims.len() < 2 || acts.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} widths need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                acts.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let layers = dims
            .windows(2)
            .zip(acts)
            .enumerate()
            .map(|(i, (w, &a))| (DenseParams::init(w[0], w[1], &seeds.child_idx("layer", i as u64)), a))
            .collect();
        Ok(Mlp { layers })
    }

    pub fn empty() -> Self {
        Mlp { layers: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(|(p, _)| p.in_dim())
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|(p, _)| p.out_dim())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (p, act) in &self.layers {
            let (out, cache) = dense_forward(&h, p, *act)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, MlpCache { layers: caches }))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Returns the gradient with respect to the input and one gradient set per layer.
    pub fn backward(&self, grad_out: &Tensor, cache: &MlpCache) -> Result<(Tensor, Vec<DenseGrads>)> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Protocol("MLP cache does not match network depth".into()));
        }
        let mut grad = grad_out.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for ((p, _), c) in self.layers.iter().zip(&cache.layers).rev() {
            let g = dense_backward(&grad, c, p)?;
            grad = g.input.clone();
            grads.push(g);
        }
        grads.reverse();
        Ok((grad, grads))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|(p, _)| [&mut p.weights, &mut p.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|(p, _)| [&p.weights, &p.bias])
            .collect()
    }
}

/// Flattens per-layer gradients in the order of [`Mlp::params_mut`].
pub fn flatten_grads(grads: &[DenseGrads]) -> Vec<&Tensor> {
    grads.iter().flat_map(|g| [&g.weights, &g.bias]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mse_distance, OptimizerState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rejects_bad_shapes() {
        let s = SeedTree::new(0);
        assert!(Mlp::init(&[3], &[], &s).is_err());
        assert!(Mlp::init(&[3, 2], &[Activation::Relu, Activation::Relu], &s).is_err());
        assert!(Mlp::init(&[3, 0, 1], &[Activation::Relu, Activation::Relu], &s).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let net = Mlp::init(&[4, 6, 3], &[Activation::Relu, Activation::Sigmoid], &SeedTree::new(1)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = Tensor::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let a = net.predict(&x).unwrap();
        assert_eq!(a, net.predict(&x).unwrap());
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (_, cache) = net.forward(&x).unwrap();
        assert!(cache.layers[0].output.data().iter().all(|&v| v >= 0.0));
    }

    // Small-step SGD on a smooth network should not increase the loss; one
    // non-monotone step is tolerated.
    #[test]
    fn small_lr_sgd_descends() {
        let mut net = Mlp::init(&[3, 5, 2], &[Activation::Sigmoid, Activation::Sigmoid], &SeedTree::new(4)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = Tensor::from_vec(8, 3, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::from_vec(8, 2, (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut opt = OptimizerState::sgd(1e-4).unwrap();
        let mut losses = Vec::new();
        for _ in 0..11 {
            let (out, cache) = net.forward(&x).unwrap();
            let (d, g) = mse_distance(&y, &out).unwrap();
            losses.push(d);
            let (_, grads) = net.backward(&g, &cache).unwrap();
            let flat: Vec<Tensor> = flatten_grads(&grads).into_iter().cloned().collect();
            let refs: Vec<&Tensor> = flat.iter().collect();
            opt.step(&mut net.params_mut(), &refs).unwrap();
        }
        let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 1, "{losses:?}");
    }
}
