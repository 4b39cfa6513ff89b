use super::layers::{Linear, RELU_GAIN};
use crate::diffcore::{Bound, Graph, ParamRegistry, Rng, Var};
use crate::error::{Error, Result};
use crate::geometry::PARAM_EPS;

/// `concat(x_att, z) -> fc -> relu -> fc -> relu -> fc(3) -> (tanh + 1) / 2`,
/// clamped to `[PARAM_EPS, 1 - PARAM_EPS]` since tanh rounds to exactly 1
/// in f64 once its input passes about 19.
#[derive(Clone, Debug)]
pub struct Regression {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    in_dim: usize,
}

impl Regression {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, node_dim: usize, latent_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let in_dim = node_dim + latent_dim;
        Regression {
            fc1: Linear::new(reg, &format!("{prefix}.fc1"), in_dim, hidden, RELU_GAIN, rng),
            fc2: Linear::new(reg, &format!("{prefix}.fc2"), hidden, hidden, RELU_GAIN, rng),
            fc3: Linear::new(reg, &format!("{prefix}.fc3"), hidden, 3, 1.0, rng),
            in_dim,
        }
    }

    /// `x: [B, C]`, `z: [B, C_z]` -> `t: [B, 3]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, z: Var) -> Result<Var> {
        let (sx, sz) = (g.shape(x).to_vec(), g.shape(z).to_vec());
        if sx.len() != 2 || sz.len() != 2 || sx[0] != sz[0] || sx[1] + sz[1] != self.in_dim {
            return Err(Error::shape("regress", &sx, &sz));
        }
        let h = g.concat(&[x, z], 1)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.fc3.forward(g, p, h)?;
        let h = g.tanh(h);
        let h = g.shift(h, 1.0);
        let t = g.scale(h, 0.5);
        Ok(g.clamp(t, PARAM_EPS, 1.0 - PARAM_EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn zero_weights_give_centre() {
        let mut reg = ParamRegistry::new();
        let r = Regression::new(&mut reg, "reg", 4, 3, 5, &mut Rng::new(0));
        let ids: Vec<_> = reg.iter().map(|p| reg.id(&p.name).unwrap()).collect();
        for id in ids {
            let shape = reg.get(id).value.shape().to_vec();
            reg.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut g = Graph::new(false);
        let p = reg.bind(&mut g);
        let x = g.constant(Tensor::full(&[1, 4], 0.7));
        let z = g.constant(Tensor::full(&[1, 3], -0.2));
        let t = r.forward(&mut g, &p, x, z).unwrap();
        assert_eq!(g.value(t).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn output_is_deterministic_and_in_range() {
        let mut reg = ParamRegistry::new();
        let r = Regression::new(&mut reg, "reg", 4, 3, 5, &mut Rng::new(1));
        let mut rng = Rng::new(2);
        let x = rng.uniform_tensor(&[6, 4], -3.0, 3.0);
        let z = rng.normal_tensor(&[6, 3]);
        let run = || {
            let mut g = Graph::new(false);
            let p = reg.bind(&mut g);
            let (xv, zv) = (g.constant(x.clone()), g.constant(z.clone()));
            let t = r.forward(&mut g, &p, xv, zv).unwrap();
            g.value(t).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn saturated_output_stays_open() {
        let mut reg = ParamRegistry::new();
        let r = Regression::new(&mut reg, "reg", 4, 3, 5, &mut Rng::new(1));
        let mut g = Graph::new(false);
        let p = reg.bind(&mut g);
        let x = g.constant(Tensor::full(&[2, 4], 1e4));
        let z = g.constant(Tensor::full(&[2, 3], -1e4));
        let t = r.forward(&mut g, &p, x, z).unwrap();
        assert!(g.value(t).data().iter().all(|v| *v >= PARAM_EPS && *v <= 1.0 - PARAM_EPS));
    }
}
