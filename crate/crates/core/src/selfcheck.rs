//! Finite-difference gradient suite over every differentiable op, the
//! attention and regression blocks, the discriminator and the losses.

use crate::diffcore::{gaussian_sample, gradcheck, Bound, GradcheckOptions, Graph, ParamRegistry, Rng, Tensor, Var};
use crate::dualpath::{adv_objective, cls_objective, generator_adv_loss, loss_kld, loss_rec, Discriminator, RecVariant};
use crate::error::Result;
use crate::gcm::{CrossAttention, EncodingMode, Regression};
use crate::geometry::composite_graph;

/// Largest accepted relative error.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared over all inputs.
    pub coords: usize,
}

impl CheckOutcome {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }
}

type Op<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Input tensor drawn uniformly from `[lo, hi)`.
struct Input(&'static [usize], f64, f64);

struct Suite {
    rng: Rng,
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn check_at(&mut self, name: &str, f: &Op<'_>, point: Vec<Tensor>, step: f64) -> Result<()> {
        let opts = GradcheckOptions {
            step,
            seed: self.rng.next_u64(),
            ..Default::default()
        };
        let r = gradcheck(f, &point, opts)?;
        self.out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_err: r.max_rel_err(),
            coords: r.inputs.iter().map(|i| i.checked).sum(),
        });
        Ok(())
    }

    fn check(&mut self, name: &str, f: &Op<'_>, inputs: &[Input]) -> Result<()> {
        let point = inputs.iter().map(|i| self.rng.uniform_tensor(i.0, i.1, i.2)).collect();
        self.check_at(name, f, point, 1e-5)
    }

    /// Checks a parameterised block w.r.t. every registry entry and the
    /// given inputs; `f` receives the binding and the input vars.
    fn check_module(
        &mut self,
        name: &str,
        reg: &ParamRegistry,
        f: &dyn Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
        inputs: &[Input],
    ) -> Result<()> {
        let n = reg.len();
        let mut point: Vec<Tensor> = reg.iter().map(|p| p.value.clone()).collect();
        point.extend(inputs.iter().map(|i| self.rng.uniform_tensor(i.0, i.1, i.2)));
        let op = move |g: &mut Graph, v: &[Var]| {
            let bound = Bound::from_vars(v[..n].to_vec());
            f(g, &bound, &v[n..])
        };
        self.check_at(name, &op, point, 1e-5)
    }
}

const U: f64 = 1.0;

/// Runs every check; the caller compares against [`GRAD_TOL`].
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut s = Suite {
        rng: Rng::derived(seed, 0x67c),
        out: Vec::new(),
    };

    s.check("add", &|g, v| g.add(v[0], v[1]), &[Input(&[3, 4], -U, U), Input(&[3, 4], -U, U)])?;
    s.check("sub", &|g, v| g.sub(v[0], v[1]), &[Input(&[3, 4], -U, U), Input(&[3, 4], -U, U)])?;
    s.check("mul", &|g, v| g.mul(v[0], v[1]), &[Input(&[3, 4], -U, U), Input(&[3, 4], -U, U)])?;
    s.check("add_suffix", &|g, v| g.add_suffix(v[0], v[1]), &[Input(&[2, 3, 4], -U, U), Input(&[4], -U, U)])?;
    s.check("scale", &|g, v| Ok(g.scale(v[0], -1.7)), &[Input(&[5], -U, U)])?;
    s.check("shift", &|g, v| Ok(g.shift(v[0], 0.3)), &[Input(&[5], -U, U)])?;
    s.check("relu", &|g, v| Ok(g.relu(v[0])), &[Input(&[12], -U, U)])?;
    s.check("leaky_relu", &|g, v| Ok(g.leaky_relu(v[0], 0.2)), &[Input(&[12], -U, U)])?;
    s.check("tanh", &|g, v| Ok(g.tanh(v[0])), &[Input(&[8], -2.0, 2.0)])?;
    s.check("sigmoid", &|g, v| Ok(g.sigmoid(v[0])), &[Input(&[8], -3.0, 3.0)])?;
    s.check("exp", &|g, v| Ok(g.exp(v[0])), &[Input(&[8], -U, U)])?;
    s.check("log", &|g, v| Ok(g.log(v[0])), &[Input(&[8], 0.2, 2.0)])?;
    s.check("recip", &|g, v| Ok(g.recip(v[0])), &[Input(&[8], 0.2, 2.0)])?;
    s.check("abs", &|g, v| Ok(g.abs(v[0])), &[Input(&[12], -U, U)])?;
    s.check("square", &|g, v| Ok(g.square(v[0])), &[Input(&[8], -U, U)])?;
    s.check("clamp", &|g, v| Ok(g.clamp(v[0], -0.5, 0.5)), &[Input(&[12], -U, U)])?;
    s.check("matmul", &|g, v| g.matmul(v[0], v[1]), &[Input(&[3, 4], -U, U), Input(&[4, 2], -U, U)])?;
    s.check("bmm", &|g, v| g.bmm(v[0], v[1]), &[Input(&[2, 3, 4], -U, U), Input(&[2, 4, 5], -U, U)])?;
    s.check(
        "linear",
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
        &[Input(&[2, 3, 4], -U, U), Input(&[4, 5], -U, U), Input(&[5], -U, U)],
    )?;
    s.check(
        "conv2d",
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        &[Input(&[2, 3, 6, 5], -U, U), Input(&[4, 3, 3, 3], -U, U), Input(&[4], -U, U)],
    )?;
    s.check(
        "conv2d_stride2",
        &|g, v| g.conv2d(v[0], v[1], None, 2, 1),
        &[Input(&[1, 2, 7, 6], -U, U), Input(&[3, 2, 3, 3], -U, U)],
    )?;
    s.check("max_pool2", &|g, v| g.max_pool2(v[0]), &[Input(&[2, 2, 4, 6], -U, U)])?;
    s.check("adaptive_avg_pool", &|g, v| g.adaptive_avg_pool(v[0], 3), &[Input(&[1, 2, 7, 5], -U, U)])?;
    s.check(
        "batchnorm",
        &|g, v| {
            let rm = g.constant(Tensor::zeros(&[3]));
            let rv = g.constant(Tensor::full(&[3], 1.0));
            g.batchnorm(v[0], v[1], v[2], rm, rv)
        },
        &[Input(&[4, 3, 2, 3], -U, U), Input(&[3], 0.5, 1.5), Input(&[3], -U, U)],
    )?;
    s.check("softmax", &|g, v| g.softmax(v[0], 1), &[Input(&[2, 5, 3], -2.0, 2.0)])?;
    s.check(
        "concat",
        &|g, v| g.concat(&[v[0], v[1]], 1),
        &[Input(&[2, 3, 2], -U, U), Input(&[2, 1, 2], -U, U)],
    )?;
    s.check("slice", &|g, v| g.slice(v[0], 2, 1, 2), &[Input(&[2, 3, 4], -U, U)])?;
    s.check("reshape", &|g, v| g.reshape(v[0], &[4, 6]), &[Input(&[2, 3, 4], -U, U)])?;
    s.check("permute", &|g, v| g.permute(v[0], &[2, 0, 1]), &[Input(&[2, 3, 4], -U, U)])?;
    s.check("expand", &|g, v| g.expand(v[0], 1, 3), &[Input(&[2, 1, 4], -U, U)])?;
    s.check("sum", &|g, v| Ok(g.sum(v[0])), &[Input(&[3, 4], -U, U)])?;
    s.check("mean", &|g, v| Ok(g.mean(v[0])), &[Input(&[3, 4], -U, U)])?;

    // sampler: generic placements keep sample points off cell edges
    let src = s.rng.uniform_tensor(&[2, 2, 9, 11], 0.0, 1.0);
    let theta = Tensor::new(
        &[2, 2, 3],
        vec![1.37, 0.0, 0.113, 0.0, 1.29, -0.071, 2.11, 0.0, 0.42, 0.0, 1.83, 0.331],
    )?;
    s.check_at("grid_sample", &|g, v| g.grid_sample(v[0], v[1]), vec![src, theta], 1e-6)?;
    let bg = s.rng.uniform_tensor(&[2, 3, 10, 10], 0.0, 1.0);
    let fg = s.rng.uniform_tensor(&[2, 3, 10, 10], 0.0, 1.0);
    let mask = s.rng.uniform_tensor(&[2, 1, 10, 10], 0.0, 1.0);
    let t = Tensor::new(&[2, 3], vec![0.613, 0.271, 0.744, 0.387, 0.829, 0.158])?;
    s.check_at(
        "composite",
        &|g, v| {
            let (img, m) = composite_graph(g, v[0], v[1], v[2], v[3])?;
            let a = g.sum(img);
            let b = g.sum(m);
            let b = g.scale(b, 0.37);
            g.add(a, b)
        },
        vec![bg, fg, mask, t],
        1e-6,
    )?;
    s.check(
        "gaussian_sample",
        &|g, v| gaussian_sample(g, &mut Rng::new(11), v[0], v[1]),
        &[Input(&[2, 5], -U, U), Input(&[2, 5], 0.5, 1.5)],
    )?;

    for (label, mode, shared) in [
        ("attention", EncodingMode::Both, false),
        ("attention_key_only", EncodingMode::KeyOnly, false),
        ("attention_value_only", EncodingMode::ValueOnly, false),
        ("attention_no_encoding", EncodingMode::Off, false),
        ("attention_shared_encoding", EncodingMode::Both, true),
    ] {
        let mut reg = ParamRegistry::new();
        let attn = CrossAttention::new(&mut reg, "attn", 16, 8, 5, mode, shared, &mut s.rng);
        let f = move |g: &mut Graph, p: &Bound, v: &[Var]| {
            let (x, alpha) = attn.forward(g, p, v[0], v[1])?;
            let a = g.reshape(alpha, &[2, 40])?;
            g.concat(&[x, a], 1)
        };
        s.check_module(label, &reg, &f, &[Input(&[2, 16], -U, U), Input(&[2, 5, 16], -U, U)])?;
    }

    let mut reg = ParamRegistry::new();
    let regression = Regression::new(&mut reg, "reg", 8, 4, 6, &mut s.rng);
    let f = move |g: &mut Graph, p: &Bound, v: &[Var]| regression.forward(g, p, v[0], v[1]);
    s.check_module("regression", &reg, &f, &[Input(&[3, 8], -U, U), Input(&[3, 4], -U, U)])?;

    let mut reg = ParamRegistry::new();
    let disc = Discriminator::new(&mut reg, "disc", &[4, 4], &mut s.rng);
    let f = move |g: &mut Graph, p: &Bound, v: &[Var]| disc.forward(g, p, v[0], v[1]);
    s.check_module(
        "discriminator",
        &reg,
        &f,
        &[Input(&[2, 3, 8, 8], 0.0, 1.0), Input(&[2, 1, 8, 8], 0.0, 1.0)],
    )?;

    s.check("loss_kld", &|g, v| loss_kld(g, v[0], v[1]), &[Input(&[3, 6], -U, U), Input(&[3, 6], -U, U)])?;
    let pred = s.rng.uniform_tensor(&[4, 3], 0.05, 0.95);
    let target = s.rng.uniform_tensor(&[4, 3], 0.05, 0.95);
    for variant in [RecVariant::L1Uniform, RecVariant::L2Uniform] {
        s.check_at(
            &format!("loss_rec_{}", variant.name()),
            &move |g, v| loss_rec(g, v[0], v[1], variant),
            vec![pred.clone(), target.clone()],
            1e-5,
        )?;
    }
    // weighted forms: the weights are constants taken from the prediction, so
    // the finite-difference reference is taken w.r.t. the target only
    for variant in [RecVariant::L2Linear, RecVariant::L2Trig] {
        let fixed = pred.clone();
        s.check_at(
            &format!("loss_rec_{}", variant.name()),
            &move |g, v| {
                let p = g.constant(fixed.clone());
                loss_rec(g, p, v[0], variant)
            },
            vec![target.clone()],
            1e-5,
        )?;
    }
    let probs = [Input(&[4, 1], 0.05, 0.95), Input(&[4, 1], 0.05, 0.95)];
    s.check("adv_objective", &|g, v| adv_objective(g, v[0], v[1]), &probs)?;
    s.check("cls_objective", &|g, v| cls_objective(g, v[0], v[1]), &probs)?;
    s.check("generator_adv", &|g, v| Ok(generator_adv_loss(g, v[0], false)), &probs[..1])?;
    s.check("generator_adv_saturating", &|g, v| Ok(generator_adv_loss(g, v[0], true)), &probs[..1])?;

    Ok(s.out)
}
