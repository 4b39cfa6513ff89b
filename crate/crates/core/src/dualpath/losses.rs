use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Reconstruction loss form and per-field weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecVariant {
    L1Uniform,
    L2Uniform,
    /// Scale weighted by `t_r`, position by `1 - t_r`.
    L2Linear,
    /// Scale weighted by `sin(pi t_r / 2)`, position by `cos(pi t_r / 2)`.
    L2Trig,
}

impl RecVariant {
    pub fn name(self) -> &'static str {
        match self {
            RecVariant::L1Uniform => "l1",
            RecVariant::L2Uniform => "l2",
            RecVariant::L2Linear => "l2-linear",
            RecVariant::L2Trig => "l2-trig",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(RecVariant::L1Uniform),
            "l2" => Ok(RecVariant::L2Uniform),
            "l2-linear" => Ok(RecVariant::L2Linear),
            "l2-trig" => Ok(RecVariant::L2Trig),
            other => Err(Error::Config(format!("unknown reconstruction loss '{other}'"))),
        }
    }

    /// Weights `[scale, x, y]` for a predicted scale `t_r`.
    pub fn weights(self, t_r: f64) -> [f64; 3] {
        match self {
            RecVariant::L1Uniform | RecVariant::L2Uniform => [1.0; 3],
            RecVariant::L2Linear => [t_r, 1.0 - t_r, 1.0 - t_r],
            RecVariant::L2Trig => {
                let a = std::f64::consts::FRAC_PI_2 * t_r;
                [a.sin(), a.cos(), a.cos()]
            }
        }
    }
}

/// Mean over latent dimensions (and batch) of
/// `0.5 * (mu^2 + sigma^2 - 1 - log sigma^2)`, with `logvar = log sigma^2`.
pub fn loss_kld(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu);
    let var = g.exp(logvar);
    let s = g.add(m2, var)?;
    let s = g.shift(s, -1.0);
    let s = g.sub(s, logvar)?;
    let m = g.mean(s);
    Ok(g.scale(m, 0.5))
}

/// Reconstruction loss between predicted `t_s` and target `t_gt`, both
/// `[B, 3]`, averaged over the batch. L2 forms are the weighted squared error
/// summed over the three fields and divided by 3; the weights are constants
/// computed from the predicted scale.
pub fn loss_rec(g: &mut Graph, t_s: Var, t_gt: Var, variant: RecVariant) -> Result<Var> {
    let shape = g.shape(t_s).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::shape("loss_rec", &shape, &[0, 3]));
    }
    let diff = g.sub(t_s, t_gt)?;
    if variant == RecVariant::L1Uniform {
        let a = g.abs(diff);
        return Ok(g.mean(a));
    }
    let weights: Vec<f64> = g
        .value(t_s)
        .data()
        .chunks(3)
        .flat_map(|row| variant.weights(row[0]))
        .collect();
    let w = g.constant(Tensor::new(&shape, weights)?);
    let sq = g.square(diff);
    let weighted = g.mul(sq, w)?;
    Ok(g.mean(weighted))
}

fn log_p(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    g.log(c)
}

fn log_1mp(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let n = g.scale(c, -1.0);
    let q = g.shift(n, 1.0);
    g.log(q)
}

/// `mean log D(real) + mean log(1 - D(fake))`, maximised by the
/// discriminator.
pub fn adv_objective(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let a = log_p(g, d_real);
    let a = g.mean(a);
    let b = log_1mp(g, d_fake);
    let b = g.mean(b);
    g.add(a, b)
}

/// `mean log D(pos) + mean log(1 - D(neg))`: the discriminator's term on
/// labelled positive and negative composites. At most 0.
pub fn cls_objective(g: &mut Graph, d_pos: Var, d_neg: Var) -> Result<Var> {
    adv_objective(g, d_pos, d_neg)
}

/// Generator loss on fakes: `-mean log D(fake)`, or `mean log(1 - D(fake))`
/// when `saturating`.
pub fn generator_adv_loss(g: &mut Graph, d_fake: Var, saturating: bool) -> Var {
    if saturating {
        let l = log_1mp(g, d_fake);
        g.mean(l)
    } else {
        let l = log_p(g, d_fake);
        let m = g.mean(l);
        g.scale(m, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn kld_closed_forms() {
        let mut g = Graph::new(false);
        let mu = g.constant(Tensor::zeros(&[2, 4]));
        let lv = g.constant(Tensor::zeros(&[2, 4]));
        let k = loss_kld(&mut g, mu, lv).unwrap();
        assert_eq!(scalar(&g, k), 0.0);
        let mu = g.constant(Tensor::full(&[2, 4], 1.0));
        let k = loss_kld(&mut g, mu, lv).unwrap();
        assert!((scalar(&g, k) - 0.5).abs() < 1e-15);
        let mu = g.constant(Tensor::new(&[1, 3], vec![0.3, -2.0, 0.0]).unwrap());
        let lv = g.constant(Tensor::new(&[1, 3], vec![1.5, -0.7, 0.2]).unwrap());
        let k = loss_kld(&mut g, mu, lv).unwrap();
        assert!(scalar(&g, k) > 0.0);
    }

    #[test]
    fn rec_zero_on_match_for_every_variant() {
        for v in [RecVariant::L1Uniform, RecVariant::L2Uniform, RecVariant::L2Linear, RecVariant::L2Trig] {
            let mut g = Graph::new(false);
            let t = g.constant(Tensor::new(&[2, 3], vec![0.2, 0.4, 0.9, 0.7, 0.1, 0.5]).unwrap());
            let l = loss_rec(&mut g, t, t, v).unwrap();
            assert_eq!(scalar(&g, l), 0.0);
        }
    }

    #[test]
    fn trig_limit_example() {
        let mut g = Graph::new(false);
        let ts = g.constant(Tensor::new(&[1, 3], vec![1.0 - 1e-9, 0.0, 0.0]).unwrap());
        let tg = g.constant(Tensor::new(&[1, 3], vec![0.5, 0.3, 0.7]).unwrap());
        let l = loss_rec(&mut g, ts, tg, RecVariant::L2Trig).unwrap();
        assert!((scalar(&g, l) - 0.25 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_l2_is_plain_mse() {
        let mut g = Graph::new(false);
        let ts = g.constant(Tensor::new(&[1, 3], vec![0.1, 0.5, 0.9]).unwrap());
        let tg = g.constant(Tensor::new(&[1, 3], vec![0.3, 0.2, 0.8]).unwrap());
        let l = loss_rec(&mut g, ts, tg, RecVariant::L2Uniform).unwrap();
        let mse = (0.04 + 0.09 + 0.01) / 3.0;
        assert!((scalar(&g, l) - mse).abs() < 1e-15);
    }

    #[test]
    fn adversarial_values() {
        let mut g = Graph::new(false);
        let half = g.constant(Tensor::full(&[3, 1], 0.5));
        let cls = cls_objective(&mut g, half, half).unwrap();
        assert!((scalar(&g, cls) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let one = g.constant(Tensor::full(&[3, 1], 1.0));
        let zero = g.constant(Tensor::full(&[3, 1], 0.0));
        let best = cls_objective(&mut g, one, zero).unwrap();
        assert!(scalar(&g, best).abs() < 1e-6);
        let mut last = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let d = g.constant(Tensor::full(&[2, 1], p));
            let l = generator_adv_loss(&mut g, d, false);
            assert!(scalar(&g, l) < last);
            last = scalar(&g, l);
        }
    }

    #[test]
    fn weights_are_detached() {
        // gradient of the trig loss w.r.t. t_r is the plain weighted residual
        let mut g = Graph::new(false);
        let ts = g.input(Tensor::new(&[1, 3], vec![0.4, 0.5, 0.5]).unwrap());
        let tg = g.constant(Tensor::new(&[1, 3], vec![0.2, 0.5, 0.5]).unwrap());
        let l = loss_rec(&mut g, ts, tg, RecVariant::L2Trig).unwrap();
        g.backward(l).unwrap();
        let w = (std::f64::consts::FRAC_PI_2 * 0.4).sin();
        let expect = 2.0 * w * 0.2 / 3.0;
        assert!((g.grad(ts).unwrap()[0] - expect).abs() < 1e-15);
    }
}
