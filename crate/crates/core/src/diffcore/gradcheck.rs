//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::{Rng, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Coordinates checked per input; all of them when the input is smaller.
    pub max_coords: usize,
    pub seed: u64,
    /// Build graphs in training mode (batchnorm uses batch statistics).
    pub training: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            max_coords: 64,
            seed: 0x9e37,
            training: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Reduces a non-scalar output to a scalar with a fixed pseudo-random
/// projection, so every output coordinate contributes.
fn reduce(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(g.sum(out));
    }
    let mut rng = Rng::new(0x5eed_0f_u64 ^ shape.iter().product::<usize>() as u64);
    let proj = rng.uniform_tensor(&shape, -1.0, 1.0);
    let p = g.constant(proj);
    let prod = g.mul(out, p)?;
    Ok(g.sum(prod))
}

fn evaluate<F>(f: &F, point: &[Tensor], training: bool) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(training);
    let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let s = reduce(&mut g, out)?;
    Ok(g.value(s).item())
}

/// Compares the reverse-mode gradient of `f` at `point` with central finite
/// differences, input by input.
pub fn gradcheck<F>(f: F, point: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(opts.training);
    let vars: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let s = reduce(&mut g, out)?;
    g.backward(s)?;

    let mut rng = Rng::new(opts.seed);
    let mut inputs = Vec::with_capacity(point.len());
    for (k, v) in vars.iter().enumerate() {
        let n = point[k].numel();
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            (0..opts.max_coords).map(|_| rng.index(0, n)).collect()
        };
        let mut report = InputReport {
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let mut plus = point.to_vec();
            plus[k].data_mut()[c] += opts.step;
            let mut minus = point.to_vec();
            minus[k].data_mut()[c] -= opts.step;
            let numeric = (evaluate(&f, &plus, opts.training)? - evaluate(&f, &minus, opts.training)?) / (2.0 * opts.step);
            let err = relative_error(analytic[c], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = c;
                report.analytic = analytic[c];
                report.numeric = numeric;
            }
        }
        inputs.push(report);
    }
    Ok(GradcheckReport { inputs })
}
