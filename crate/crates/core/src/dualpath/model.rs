use std::path::Path;

use super::{Discriminator, LatentHead};
use crate::diffcore::{Bound, Checkpoint, Graph, ParamRegistry, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::gcm::{Encoded, Gcm, ModelConfig};
use crate::geometry::{composite, composite_graph, PlanarTensor, TransformParams};

/// Generator outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    pub composite: Var,
    pub placed_mask: Var,
    pub t: Var,
    pub alphas: Var,
}

/// One sampled placement with its rendering.
#[derive(Clone, Debug)]
pub struct Placement {
    pub t: TransformParams,
    pub composite: PlanarTensor,
    pub placed_mask: PlanarTensor,
}

/// Scene inputs for batched sampling.
#[derive(Clone, Copy, Debug)]
pub struct SceneInput<'a> {
    pub bg: &'a PlanarTensor,
    pub fg: &'a PlanarTensor,
    pub mask: &'a PlanarTensor,
}

/// Generator (graph completion core + latent head, one registry) and
/// discriminator (own registry). Both paths bind the same generator registry.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub gcm: Gcm,
    pub latent: LatentHead,
    pub disc: Discriminator,
    pub generator: ParamRegistry,
    pub discriminator: ParamRegistry,
}

const SAMPLE_CHUNK: usize = 32;

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::derived(seed, 0);
        let mut generator = ParamRegistry::new();
        let gcm = Gcm::new(config, &mut generator, &mut rng)?;
        let latent = LatentHead::new(
            &mut generator,
            "latent",
            gcm.backbone.out_channels(),
            config.node_dim,
            config.latent_dim,
            &mut rng,
        );
        let mut discriminator = ParamRegistry::new();
        let disc = Discriminator::new(&mut discriminator, "disc", &config.disc_widths, &mut rng);
        Ok(Model {
            config: config.clone(),
            gcm,
            latent,
            disc,
            generator,
            discriminator,
        })
    }

    /// Places `fg` into `bg` for latent codes `z: [B, C_z]`.
    pub fn generator_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        enc: &Encoded,
        bg: Var,
        fg: Var,
        mask: Var,
        z: Var,
    ) -> Result<GeneratorOutput> {
        let (t, alphas) = self.gcm.complete(g, p, enc, z)?;
        let (composite, placed_mask) = composite_graph(g, bg, fg, mask, t)?;
        Ok(GeneratorOutput {
            composite,
            placed_mask,
            t,
            alphas,
        })
    }

    pub fn discriminator_forward(&self, g: &mut Graph, p: &Bound, image: Var, mask: Var) -> Result<Var> {
        self.disc.forward(g, p, image, mask)
    }

    /// Posterior over the latent code given a positive composite. With
    /// `detach_backbone` the shared backbone gets no gradient from this path.
    pub fn encode_latent(&self, g: &mut Graph, p: &Bound, image: Var, mask: Var, detach_backbone: bool) -> Result<(Var, Var)> {
        let mut f = self.gcm.backbone.forward(g, p, image, mask)?;
        if detach_backbone {
            f = g.detach(f);
        }
        self.latent.forward(g, p, f)
    }

    fn stack(scenes: &[SceneInput<'_>]) -> Result<(Tensor, Tensor, Tensor)> {
        let bg = PlanarTensor::batch(&scenes.iter().map(|s| s.bg).collect::<Vec<_>>())?;
        let fg = PlanarTensor::batch(&scenes.iter().map(|s| s.fg).collect::<Vec<_>>())?;
        let mask = PlanarTensor::batch(&scenes.iter().map(|s| s.mask).collect::<Vec<_>>())?;
        Ok((bg, fg, mask))
    }

    /// `k` placements per scene from the prior, in inference mode. The
    /// foreground and background are encoded once per chunk of scenes; for
    /// each draw a `[chunk, C_z]` block of `rng` normals is consumed.
    pub fn sample_params(&self, scenes: &[SceneInput<'_>], rng: &mut Rng, k: usize) -> Result<Vec<Vec<TransformParams>>> {
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(SAMPLE_CHUNK) {
            let (bg, fg, mask) = Self::stack(chunk)?;
            let b = chunk.len();
            let mut g = Graph::new(false);
            let p = self.generator.bind_frozen(&mut g);
            let (bg, fg, mask) = (g.constant(bg), g.constant(fg), g.constant(mask));
            let enc = self.gcm.encode(&mut g, &p, bg, fg, mask)?;
            let mut per_scene = vec![Vec::with_capacity(k); b];
            for _ in 0..k {
                let z = g.constant(rng.normal_tensor(&[b, self.config.latent_dim]));
                let (t, _) = self.gcm.complete(&mut g, &p, &enc, z)?;
                for (i, row) in g.value(t).data().chunks(3).enumerate() {
                    per_scene[i].push(TransformParams::new(row[0], row[1], row[2]));
                }
            }
            out.extend(per_scene);
        }
        Ok(out)
    }

    /// `k` rendered placements for one scene.
    pub fn infer(&self, bg: &PlanarTensor, fg: &PlanarTensor, mask: &PlanarTensor, rng: &mut Rng, k: usize) -> Result<Vec<Placement>> {
        let ts = self.sample_params(&[SceneInput { bg, fg, mask }], rng, k)?;
        ts[0]
            .iter()
            .map(|t| {
                let (c, m) = composite(bg, fg, mask, *t)?;
                Ok(Placement {
                    t: *t,
                    composite: c,
                    placed_mask: m,
                })
            })
            .collect()
    }

    /// Placement and per-head attention for one scene and latent code.
    pub fn attention(&self, bg: &PlanarTensor, fg: &PlanarTensor, mask: &PlanarTensor, z: &Tensor) -> Result<(TransformParams, Vec<f64>)> {
        let (tb, tf, tm) = Self::stack(&[SceneInput { bg, fg, mask }])?;
        let mut g = Graph::new(false);
        let p = self.generator.bind_frozen(&mut g);
        let (b, f, m) = (g.constant(tb), g.constant(tf), g.constant(tm));
        let enc = self.gcm.encode(&mut g, &p, b, f, m)?;
        let zv = g.constant(z.clone().reshape(&[1, self.config.latent_dim])?);
        let (t, alphas) = self.gcm.complete(&mut g, &p, &enc, zv)?;
        let d = g.value(t).data();
        Ok((TransformParams::new(d[0], d[1], d[2]), g.value(alphas).data().to_vec()))
    }

    /// Checkpoint with the architecture header followed by `extra` lines.
    pub fn checkpoint(&self, extra: &str) -> Checkpoint {
        Checkpoint {
            header: format!("{}{}", self.config.header(), extra),
            groups: vec![
                ("generator".into(), self.generator.clone()),
                ("discriminator".into(), self.discriminator.clone()),
            ],
        }
    }

    pub fn save(&self, path: &Path, extra: &str) -> Result<()> {
        self.checkpoint(extra).save(path)
    }

    /// Rebuilds the architecture from the header, then loads the weights.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_header(&ck.header)?;
        let mut model = Model::new(&config, 0)?;
        model.load_weights(ck)?;
        Ok(model)
    }

    /// Loads weights into this architecture; the header must match it.
    pub fn load_weights(&mut self, ck: Checkpoint) -> Result<()> {
        let stored = ModelConfig::from_header(&ck.header)?;
        if stored != self.config {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch:\n{}vs\n{}",
                stored.header(),
                self.config.header()
            )));
        }
        let mut groups = ck.groups.into_iter();
        for (name, target) in [("generator", &mut self.generator), ("discriminator", &mut self.discriminator)] {
            let (n, reg) = groups
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing group {name}")))?;
            if n != name {
                return Err(Error::Checkpoint(format!("expected group {name}, found {n}")));
            }
            target.load_from(reg)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(rng: &mut Rng, side: usize) -> (PlanarTensor, PlanarTensor, PlanarTensor) {
        let bg = PlanarTensor::new(3, side, side, rng.uniform_tensor(&[3 * side * side], 0.0, 1.0).into_data()).unwrap();
        let fg = PlanarTensor::filled(3, side, side, 0.8);
        let mask = PlanarTensor::filled(1, side, side, 1.0);
        (bg, fg, mask)
    }

    #[test]
    fn infer_is_seeded_and_valid() {
        let model = Model::new(&ModelConfig::tiny(), 1).unwrap();
        let (bg, fg, mask) = scene(&mut Rng::new(2), 16);
        let a = model.infer(&bg, &fg, &mask, &mut Rng::new(9), 10).unwrap();
        let b = model.infer(&bg, &fg, &mask, &mut Rng::new(9), 10).unwrap();
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.t, y.t);
            assert_eq!(x.composite, y.composite);
            assert!(x.t.to_array().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn untrained_latent_head_is_standard_normal() {
        let model = Model::new(&ModelConfig::tiny(), 1).unwrap();
        let mut g = Graph::new(false);
        let p = model.generator.bind(&mut g);
        let mut rng = Rng::new(3);
        let i = g.constant(rng.uniform_tensor(&[2, 3, 16, 16], 0.0, 1.0));
        let m = g.constant(rng.uniform_tensor(&[2, 1, 16, 16], 0.0, 1.0));
        let (mu, lv) = model.encode_latent(&mut g, &p, i, m, false).unwrap();
        assert_eq!(g.shape(mu), &[2, 8]);
        assert!(g.value(mu).data().iter().all(|v| *v == 0.0));
        assert!(g.value(lv).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let model = Model::new(&ModelConfig::tiny(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, "epoch=3\n").unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in back.generator.iter().zip(model.generator.iter()) {
            assert_eq!(a.value, b.value);
        }
        let mut other_cfg = ModelConfig::tiny();
        other_cfg.encoding = crate::gcm::EncodingMode::Off;
        let mut other = Model::new(&other_cfg, 4).unwrap();
        assert!(other.load_weights(Checkpoint::load(&path).unwrap()).is_err());
    }
}
