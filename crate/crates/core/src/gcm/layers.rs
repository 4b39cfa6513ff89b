//! Parameterised building blocks shared by the generator, the latent head and
//! the discriminator.

use crate::diffcore::{Bound, Graph, ParamId, ParamRegistry, Rng, Tensor, Var};
use crate::error::Result;

/// Uniform fan-in init bound; `gain` is sqrt(2) ahead of a ReLU, 1 otherwise.
pub(crate) fn fan_in_bound(fan_in: usize, gain: f64) -> f64 {
    gain * (3.0 / fan_in as f64).sqrt()
}

pub(crate) const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new(reg: &mut ParamRegistry, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let w = reg.add_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in_bound(fan_in, gain), rng);
        let b = Some(reg.add(&format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Linear { w, b }
    }

    pub(crate) fn zeros(reg: &mut ParamRegistry, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = reg.add(&format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = Some(reg.add(&format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Linear { w, b }
    }

    pub(crate) fn without_bias(reg: &mut ParamRegistry, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let w = reg.add_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in_bound(fan_in, gain), rng);
        Linear { w, b: None }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

/// 3x3 conv (stride 1, pad 1, no bias) + batchnorm + ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ConvBnRelu {
    pub(crate) fn new(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let fan_in = cin * 9;
        ConvBnRelu {
            w: reg.add_uniform(&format!("{name}.conv"), &[cout, cin, 3, 3], fan_in_bound(fan_in, RELU_GAIN), rng),
            gamma: reg.add(&format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0)),
            beta: reg.add(&format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
            running_mean: reg.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[cout])),
            running_var: reg.add_buffer(&format!("{name}.bn.running_var"), Tensor::full(&[cout], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.w), None, 1, 1)?;
        let y = g.batchnorm(
            y,
            p.var(self.gamma),
            p.var(self.beta),
            p.var(self.running_mean),
            p.var(self.running_var),
        )?;
        Ok(g.relu(y))
    }
}
