use crate::diffcore::{Bound, Graph, ParamRegistry, Rng, Var};
use crate::error::Result;
use crate::gcm::layers::Linear;
use crate::gcm::NodeHead;

/// Maps backbone features of a composite to a diagonal Gaussian over the
/// latent code. The mean and log-variance layers start at zero, so an
/// untrained head yields the standard normal.
#[derive(Clone, Debug)]
pub struct LatentHead {
    pub nodes: NodeHead,
    pub mu: Linear,
    pub logvar: Linear,
    node_dim: usize,
}

impl LatentHead {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, in_channels: usize, node_dim: usize, latent_dim: usize, rng: &mut Rng) -> Self {
        LatentHead {
            nodes: NodeHead::new(reg, &format!("{prefix}.neh"), in_channels, node_dim, &[1], rng),
            mu: Linear::zeros(reg, &format!("{prefix}.mu"), node_dim, latent_dim),
            logvar: Linear::zeros(reg, &format!("{prefix}.logvar"), node_dim, latent_dim),
            node_dim,
        }
    }

    /// `features: [B, C', h, w]` -> (`mu`, `logvar`), each `[B, C_z]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<(Var, Var)> {
        let n = self.nodes.forward(g, p, features)?;
        let b = g.shape(n)[0];
        let f = g.reshape(n, &[b, self.node_dim])?;
        let mu = self.mu.forward(g, p, f)?;
        let logvar = self.logvar.forward(g, p, f)?;
        Ok((mu, logvar))
    }
}
