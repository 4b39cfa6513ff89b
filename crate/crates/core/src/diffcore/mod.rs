//! Minimal reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape: each op evaluates eagerly and records how to
//! propagate adjoints. Parameters live in a [`ParamRegistry`] and are bound
//! onto a fresh graph for every step; gradients are read back after
//! [`Graph::backward`].

mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod rng;
pub(crate) mod sample;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradcheck, relative_error, GradcheckOptions, GradcheckReport, InputReport};
pub use graph::{Graph, StatUpdate, Var, BN_EPS};
pub use params::{AdamConfig, Bound, Param, ParamId, ParamRegistry};
pub use rng::Rng;
pub use tensor::Tensor;

use crate::error::Result;

/// Reparameterised draw `mu + sigma * eps`, `eps ~ N(0, 1)` from `rng`.
/// `sigma` is floored at 1e-8.
pub fn gaussian_sample(g: &mut Graph, rng: &mut Rng, mu: Var, sigma: Var) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let eps = g.constant(rng.normal_tensor(&shape));
    let sigma = g.clamp(sigma, 1e-8, f64::INFINITY);
    let noise = g.mul(sigma, eps)?;
    g.add(mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_sample_statistics() {
        let mut g = Graph::new(false);
        let mu = g.constant(Tensor::full(&[20000], 1.5));
        let sigma = g.constant(Tensor::full(&[20000], 2.0));
        let mut rng = Rng::new(4);
        let z = gaussian_sample(&mut g, &mut rng, mu, sigma).unwrap();
        let d = g.value(z).data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((mean - 1.5).abs() < 0.05);
        assert!((var.sqrt() - 2.0).abs() < 0.05);
    }

    #[test]
    fn gaussian_sample_is_seeded() {
        let draw = |seed| {
            let mut g = Graph::new(false);
            let mu = g.constant(Tensor::zeros(&[8]));
            let sigma = g.constant(Tensor::full(&[8], 1.0));
            let z = gaussian_sample(&mut g, &mut Rng::new(seed), mu, sigma).unwrap();
            g.value(z).clone()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn gaussian_sample_gradient() {
        let f = |g: &mut Graph, v: &[Var]| {
            let mut rng = Rng::new(11);
            gaussian_sample(g, &mut rng, v[0], v[1])
        };
        let mut rng = Rng::new(2);
        let point = vec![rng.uniform_tensor(&[5], -1.0, 1.0), rng.uniform_tensor(&[5], 0.5, 1.5)];
        let r = gradcheck(f, &point, GradcheckOptions::default()).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn sampler_gradients_wrt_source_and_theta() {
        let f = |g: &mut Graph, v: &[Var]| g.grid_sample(v[0], v[1]);
        let mut rng = Rng::new(5);
        let src = rng.uniform_tensor(&[2, 2, 9, 11], 0.0, 1.0);
        // generic placements that keep sample points off cell boundaries
        let theta = Tensor::new(
            &[2, 2, 3],
            vec![1.37, 0.0, 0.113, 0.0, 1.29, -0.071, 2.11, 0.0, 0.42, 0.0, 1.83, 0.331],
        )
        .unwrap();
        let r = gradcheck(f, &[src, theta], GradcheckOptions { step: 1e-6, ..Default::default() }).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
