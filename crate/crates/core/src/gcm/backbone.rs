use super::layers::ConvBnRelu;
use crate::diffcore::{Bound, Graph, ParamRegistry, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Small conv encoder over image + mask (4 input channels).
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<ConvBnRelu>,
    pool_stages: usize,
    out_channels: usize,
}

impl Backbone {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, widths: &[usize], pool_stages: usize, rng: &mut Rng) -> Self {
        let mut cin = 4;
        let mut blocks = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ConvBnRelu::new(reg, &format!("{prefix}.block{i}"), cin, w, rng));
            cin = w;
        }
        Backbone {
            blocks,
            pool_stages,
            out_channels: cin,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `image: [B, 3, H, W]`, `mask: [B, 1, H, W]` -> `[B, C', H/2^P, W/2^P]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var, mask: Var) -> Result<Var> {
        let (si, sm) = (g.shape(image).to_vec(), g.shape(mask).to_vec());
        if si.len() != 4 || si[1] != 3 || sm != [si[0], 1, si[2], si[3]] {
            return Err(Error::shape("backbone", &si, &sm));
        }
        let mut x = g.concat(&[image, mask], 1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x)?;
            if i < self.pool_stages {
                x = g.max_pool2(x)?;
            }
        }
        Ok(x)
    }

    /// Background encoding: the mask channel is all zeros.
    pub fn forward_unmasked(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("backbone", &s, &[0, 3, 0, 0]));
        }
        let zero = g.constant(Tensor::zeros(&[s[0], 1, s[2], s[3]]));
        self.forward(g, p, image, zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_encoder_shape() {
        let mut reg = ParamRegistry::new();
        let mut rng = Rng::new(0);
        let bb = Backbone::new(&mut reg, "backbone", &[16, 32, 64, 64], 4, &mut rng);
        let mut g = Graph::new(false);
        let p = reg.bind(&mut g);
        let img = g.constant(rng.uniform_tensor(&[1, 3, 64, 64], 0.0, 1.0));
        let m = g.constant(Tensor::zeros(&[1, 1, 64, 64]));
        let f = bb.forward(&mut g, &p, img, m).unwrap();
        assert_eq!(g.shape(f), &[1, 64, 4, 4]);
    }

    #[test]
    fn mask_channel_is_live() {
        let mut reg = ParamRegistry::new();
        let mut rng = Rng::new(1);
        let bb = Backbone::new(&mut reg, "backbone", &[8, 8], 2, &mut rng);
        let image = rng.uniform_tensor(&[1, 3, 16, 16], 0.0, 1.0);
        let run = |mask: Tensor| {
            let mut g = Graph::new(false);
            let p = reg.bind(&mut g);
            let i = g.constant(image.clone());
            let m = g.constant(mask);
            let f = bb.forward(&mut g, &p, i, m).unwrap();
            g.value(f).clone()
        };
        let a = run(Tensor::zeros(&[1, 1, 16, 16]));
        let b = run(Tensor::full(&[1, 1, 16, 16], 1.0));
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let mut reg = ParamRegistry::new();
        let mut rng = Rng::new(2);
        let bb = Backbone::new(&mut reg, "backbone", &[8, 8], 2, &mut rng);
        for training in [false, true] {
            let mut g = Graph::new(training);
            let p = reg.bind(&mut g);
            let i = g.constant(Tensor::zeros(&[2, 3, 16, 16]));
            let f = bb.forward_unmasked(&mut g, &p, i).unwrap();
            assert!(g.value(f).data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_mismatched_mask() {
        let mut reg = ParamRegistry::new();
        let bb = Backbone::new(&mut reg, "backbone", &[4], 1, &mut Rng::new(0));
        let mut g = Graph::new(false);
        let p = reg.bind(&mut g);
        let i = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let m = g.constant(Tensor::zeros(&[1, 1, 4, 8]));
        assert!(matches!(bb.forward(&mut g, &p, i, m), Err(Error::ShapeMismatch { .. })));
    }
}
