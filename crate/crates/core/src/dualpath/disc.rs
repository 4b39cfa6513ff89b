use crate::diffcore::{Bound, Graph, ParamId, ParamRegistry, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::gcm::layers::{fan_in_bound, Linear};

const SLOPE: f64 = 0.2;

/// Strided conv stack over composite + mask, global average, linear, sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<(ParamId, ParamId)>,
    pub fc: Linear,
}

impl Discriminator {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, widths: &[usize], rng: &mut Rng) -> Self {
        let mut cin = 4;
        let gain = (2.0 / (1.0 + SLOPE * SLOPE)).sqrt();
        let mut convs = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let weight = reg.add_uniform(&format!("{prefix}.conv{i}.w"), &[w, cin, 3, 3], fan_in_bound(cin * 9, gain), rng);
            let bias = reg.add(&format!("{prefix}.conv{i}.b"), Tensor::zeros(&[w]));
            convs.push((weight, bias));
            cin = w;
        }
        let fc = Linear::new(reg, &format!("{prefix}.fc"), cin, 1, 1.0, rng);
        Discriminator { convs, fc }
    }

    /// `image: [B, 3, H, W]`, `mask: [B, 1, H, W]` -> probabilities `[B, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var, mask: Var) -> Result<Var> {
        let (si, sm) = (g.shape(image).to_vec(), g.shape(mask).to_vec());
        if si.len() != 4 || si[1] != 3 || sm != [si[0], 1, si[2], si[3]] {
            return Err(Error::shape("discriminator", &si, &sm));
        }
        let mut x = g.concat(&[image, mask], 1)?;
        for (w, b) in &self.convs {
            x = g.conv2d(x, p.var(*w), Some(p.var(*b)), 2, 1)?;
            x = g.leaky_relu(x, SLOPE);
        }
        let pooled = g.adaptive_avg_pool(x, 1)?;
        let c = g.shape(pooled)[1];
        let flat = g.reshape(pooled, &[si[0], c])?;
        let logit = self.fc.forward(g, p, flat)?;
        Ok(g.sigmoid(logit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_is_probability_and_half_at_zero_weights() {
        let mut reg = ParamRegistry::new();
        let mut rng = Rng::new(0);
        let d = Discriminator::new(&mut reg, "disc", &[4, 4, 8, 8], &mut rng);
        let img = rng.uniform_tensor(&[3, 3, 16, 16], 0.0, 1.0);
        let mask = rng.uniform_tensor(&[3, 1, 16, 16], 0.0, 1.0);
        let run = |reg: &ParamRegistry| {
            let mut g = Graph::new(false);
            let p = reg.bind(&mut g);
            let (i, m) = (g.constant(img.clone()), g.constant(mask.clone()));
            let y = d.forward(&mut g, &p, i, m).unwrap();
            g.value(y).clone()
        };
        let y = run(&reg);
        assert_eq!(y.shape(), &[3, 1]);
        assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let ids: Vec<_> = reg.iter().map(|p| reg.id(&p.name).unwrap()).collect();
        for id in ids {
            let shape = reg.get(id).value.shape().to_vec();
            reg.get_mut(id).value = Tensor::zeros(&shape);
        }
        assert!(run(&reg).data().iter().all(|v| *v == 0.5));
    }
}
