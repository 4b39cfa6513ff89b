//! Placement accuracy against the oracle, a Fréchet distance over embedded
//! composites, and parameter-space diversity.
//!
//! Anything that draws `k` placements per scene is a [`Placer`]; the trained
//! model is one, and closures wrapped in [`FnPlacer`] cover reference
//! generators (copy the stored positive, uniform random, constant).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::diffcore::{Graph, ParamRegistry, Rng, Tensor};
use crate::dualpath::{Model, SceneInput};
use crate::error::{Error, Result};
use crate::geometry::{composite, PlanarTensor, TransformParams};
use crate::synthdata::{oracle, SceneRecord};

/// Added to both covariances before the matrix square root.
pub const COV_SHRINK: f64 = 1e-6;
/// Eigenvalues below this are treated as zero.
pub const EIG_FLOOR: f64 = 1e-10;
pub const EMBED_DIM: usize = 64;

pub trait Placer {
    /// `k` placements for every scene, consuming randomness from `rng` only.
    fn place(&self, scenes: &[SceneInput<'_>], rng: &mut Rng, k: usize) -> Result<Vec<Vec<TransformParams>>>;
}

impl Placer for Model {
    fn place(&self, scenes: &[SceneInput<'_>], rng: &mut Rng, k: usize) -> Result<Vec<Vec<TransformParams>>> {
        self.sample_params(scenes, rng, k)
    }
}

/// Placer from `f(scene_index, rng)`.
pub struct FnPlacer<F>(pub F);

impl<F: Fn(usize, &mut Rng) -> TransformParams> Placer for FnPlacer<F> {
    fn place(&self, scenes: &[SceneInput<'_>], rng: &mut Rng, k: usize) -> Result<Vec<Vec<TransformParams>>> {
        Ok((0..scenes.len()).map(|i| (0..k).map(|_| (self.0)(i, rng)).collect()).collect())
    }
}

fn inputs(scenes: &[SceneRecord]) -> Vec<SceneInput<'_>> {
    scenes
        .iter()
        .map(|s| SceneInput {
            bg: &s.bg,
            fg: &s.fg,
            mask: &s.mask,
        })
        .collect()
}

/// Fraction of the given placements the oracle accepts.
pub fn placement_accuracy(scenes: &[SceneRecord], placements: &[Vec<TransformParams>]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (s, ts) in scenes.iter().zip(placements) {
        for t in ts {
            total += 1;
            hits += oracle(&s.spec, *t, &s.mask) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Mean over scenes of the mean pairwise Euclidean distance between the
/// scene's placements. Scenes with fewer than two placements contribute 0.
pub fn placement_diversity(placements: &[Vec<TransformParams>]) -> f64 {
    if placements.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for ts in placements {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                let (a, b) = (ts[i].to_array(), ts[j].to_array());
                sum += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                pairs += 1;
            }
        }
        if pairs > 0 {
            acc += sum / pairs as f64;
        }
    }
    acc / placements.len() as f64
}

pub fn accuracy(placer: &impl Placer, scenes: &[SceneRecord], rng: &mut Rng, k: usize) -> Result<f64> {
    let ts = placer.place(&inputs(scenes), rng, k)?;
    Ok(placement_accuracy(scenes, &ts))
}

pub fn diversity(placer: &impl Placer, scenes: &[SceneRecord], rng: &mut Rng, k: usize) -> Result<f64> {
    let ts = placer.place(&inputs(scenes), rng, k)?;
    Ok(placement_diversity(&ts))
}

/// Fixed, untrained conv embedder: three 3x3 conv + ReLU + 2x2 max-pool
/// stages (3 -> 16 -> 32 -> 64 channels), then a global average.
#[derive(Clone, Debug)]
pub struct Embedder {
    params: ParamRegistry,
}

const EMBED_WIDTHS: [usize; 4] = [3, 16, 32, EMBED_DIM];
const EMBED_CHUNK: usize = 32;

impl Embedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::derived(seed, 0xe3b);
        let mut params = ParamRegistry::new();
        for (i, w) in EMBED_WIDTHS.windows(2).enumerate() {
            let bound = (6.0 / (w[0] * 9) as f64).sqrt();
            params.add_uniform(&format!("embed.{i}.w"), &[w[1], w[0], 3, 3], bound, &mut rng);
            params.add(&format!("embed.{i}.b"), Tensor::zeros(&[w[1]]));
        }
        Embedder { params }
    }

    /// One `EMBED_DIM` vector per 3-channel image. Images must share a size
    /// divisible by 8.
    pub fn embed(&self, images: &[&PlanarTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EMBED_CHUNK) {
            let mut g = Graph::new(false);
            let p = self.params.bind_frozen(&mut g);
            let mut x = g.constant(PlanarTensor::batch(chunk)?);
            for i in 0..EMBED_WIDTHS.len() - 1 {
                let w = p.var(self.params.id(&format!("embed.{i}.w")).expect("built in new"));
                let b = p.var(self.params.id(&format!("embed.{i}.b")).expect("built in new"));
                x = g.conv2d(x, w, Some(b), 1, 1)?;
                x = g.relu(x);
                x = g.max_pool2(x)?;
            }
            let x = g.adaptive_avg_pool(x, 1)?;
            out.extend(g.value(x).data().chunks(EMBED_DIM).map(|c| c.to_vec()));
        }
        Ok(out)
    }
}

fn mean_cov(feats: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let x = DMatrix::from_fn(n, dim, |i, j| feats[i][j]);
    let mu = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.transpose() * &centered / denom + DMatrix::identity(dim, dim) * COV_SHRINK;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite() || *v < -EIG_FLOOR.sqrt()) {
        return Err(Error::DegenerateCovariance);
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| if v < EIG_FLOOR { 0.0 } else { v.sqrt() }));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map_or(0, |v| v.len());
    if a.is_empty() || b.is_empty() || dim == 0 {
        return Err(Error::DegenerateCovariance);
    }
    if a.iter().chain(b).any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
        return Err(Error::DegenerateCovariance);
    }
    let (mu_a, cov_a) = mean_cov(a, dim);
    let (mu_b, cov_b) = mean_cov(b, dim);
    let root_a = sym_sqrt(&cov_a)?;
    let mut inner = &root_a * &cov_b * &root_a;
    // symmetrise rounding noise before the eigendecomposition
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_cross: f64 = eig.eigenvalues.iter().map(|v| if *v < EIG_FLOOR { 0.0 } else { v.sqrt() }).sum();
    let d = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub frechet: f64,
    pub diversity: f64,
    pub n_samples: usize,
    pub k_per_sample: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "accuracy,frechet,diversity,n_samples,k_per_sample";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.accuracy, self.frechet, self.diversity, self.n_samples, self.k_per_sample
        )
    }
}

/// Draws `k` placements per scene once and scores them. The Fréchet distance
/// compares embedded generated composites with the scenes' stored positives.
pub fn evaluate(placer: &impl Placer, scenes: &[SceneRecord], rng: &mut Rng, k: usize, embedder: &Embedder) -> Result<MetricReport> {
    let ts = placer.place(&inputs(scenes), rng, k)?;
    let mut fake = Vec::new();
    let mut real = Vec::new();
    for (s, draws) in scenes.iter().zip(&ts) {
        for t in draws {
            fake.push(composite(&s.bg, &s.fg, &s.mask, *t)?.0);
        }
        for t in &s.positives {
            real.push(composite(&s.bg, &s.fg, &s.mask, *t)?.0);
        }
    }
    let fe = embedder.embed(&fake.iter().collect::<Vec<_>>())?;
    let re = embedder.embed(&real.iter().collect::<Vec<_>>())?;
    Ok(MetricReport {
        accuracy: placement_accuracy(scenes, &ts),
        frechet: frechet_distance(&fe, &re)?,
        diversity: placement_diversity(&ts),
        n_samples: scenes.len(),
        k_per_sample: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_dataset, DatasetOptions};

    fn scenes(n: usize) -> Vec<SceneRecord> {
        gen_dataset(&DatasetOptions {
            seed: 11,
            scenes: n,
            positives: 2,
            negatives: 1,
            baseline_draws: 0,
            ..Default::default()
        })
        .unwrap()
        .scenes
    }

    #[test]
    fn reference_generators() {
        let sc = scenes(20);
        let copy = FnPlacer(|i: usize, _: &mut Rng| sc[i].positives[0]);
        assert_eq!(accuracy(&copy, &sc, &mut Rng::new(0), 3).unwrap(), 1.0);
        assert_eq!(diversity(&copy, &sc, &mut Rng::new(0), 10).unwrap(), 0.0);
        let sky = FnPlacer(|_: usize, _: &mut Rng| TransformParams::new(0.01, 0.5, 0.01));
        assert!(accuracy(&sky, &sc, &mut Rng::new(0), 1).unwrap() < 0.05);
        let uniform = FnPlacer(|_: usize, r: &mut Rng| TransformParams::new(r.uniform(), r.uniform(), r.uniform()));
        let a = accuracy(&uniform, &sc, &mut Rng::new(5), 10).unwrap();
        assert!(a < 0.35, "{a}");
        assert_eq!(a, accuracy(&uniform, &sc, &mut Rng::new(5), 10).unwrap());
    }

    #[test]
    fn single_pair_diversity() {
        let d = placement_diversity(&[vec![TransformParams::new(0.5, 0.0, 0.0), TransformParams::new(0.5, 1.0, 0.0)]]);
        // both x fields sit one clamp margin inside the unit interval
        assert!((d - (1.0 - 2.0 * crate::geometry::PARAM_EPS)).abs() < 1e-12);
    }

    #[test]
    fn frechet_closed_form_1d() {
        let mut rng = Rng::new(3);
        let a: Vec<Vec<f64>> = (0..100_000).map(|_| vec![rng.normal()]).collect();
        let b: Vec<Vec<f64>> = (0..100_000).map(|_| vec![3.0 + 2.0 * rng.normal()]).collect();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 10.0).abs() < 0.5, "{d}");
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let mut rng = Rng::new(4);
        let a: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| 0.5 * rng.normal() + 0.2).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} {ba}");
        assert!(ab > 0.0);
        // fewer samples than dimensions still works thanks to shrinkage
        assert!(frechet_distance(&a[..3], &b[..2]).unwrap().is_finite());
        assert!(frechet_distance(&a, &[vec![1.0]]).is_err());
    }

    #[test]
    fn embedder_is_fixed() {
        let sc = scenes(3);
        let imgs: Vec<&PlanarTensor> = sc.iter().map(|s| &s.bg).collect();
        let e1 = Embedder::new(0).embed(&imgs).unwrap();
        let e2 = Embedder::new(0).embed(&imgs).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 3);
        assert_eq!(e1[0].len(), EMBED_DIM);
        assert_ne!(e1, Embedder::new(1).embed(&imgs).unwrap());
    }

    #[test]
    fn report_for_untrained_model() {
        let model = Model::new(&crate::gcm::ModelConfig::tiny(), 0).unwrap();
        let small = gen_dataset(&DatasetOptions {
            seed: 12,
            scenes: 4,
            side: 16,
            positives: 1,
            negatives: 1,
            baseline_draws: 0,
            ..Default::default()
        })
        .unwrap()
        .scenes;
        let r = evaluate(&model, &small, &mut Rng::new(0), 4, &Embedder::new(0)).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!(r.frechet >= 0.0 && r.diversity >= 0.0);
        assert_eq!(r.csv_row().split(',').count(), 5);
    }
}
