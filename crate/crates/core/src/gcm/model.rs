use super::{Backbone, CrossAttention, ModelConfig, NodeHead, Regression};
use crate::diffcore::{Bound, Graph, ParamRegistry, Rng, Var};
use crate::error::Result;

/// Foreground node `[B, C]` and background nodes `[B, N, C]`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub fg: Var,
    pub bg: Var,
}

/// Generator core: shared backbone, foreground and background node heads,
/// cross-attention and regression. Parameters are named `backbone.*`,
/// `neh_fg.*`, `neh_bg.*`, `attn.*` and `reg.*`.
#[derive(Clone, Debug)]
pub struct Gcm {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neh_fg: NodeHead,
    pub neh_bg: NodeHead,
    pub attention: CrossAttention,
    pub regression: Regression,
}

impl Gcm {
    pub fn new(config: &ModelConfig, reg: &mut ParamRegistry, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.node_dim;
        let backbone = Backbone::new(reg, "backbone", &config.backbone_widths, config.pool_stages, rng);
        let cb = backbone.out_channels();
        let neh_fg = NodeHead::new(reg, "neh_fg", cb, c, &[1], rng);
        let neh_bg = NodeHead::new(reg, "neh_bg", cb, c, &config.grids, rng);
        let attention = CrossAttention::new(
            reg,
            "attn",
            c,
            config.heads,
            config.num_nodes(),
            config.encoding,
            config.shared_encoding,
            rng,
        );
        let regression = Regression::new(reg, "reg", c, config.latent_dim, config.hidden, rng);
        Ok(Gcm {
            config: config.clone(),
            backbone,
            neh_fg,
            neh_bg,
            attention,
            regression,
        })
    }

    /// Encodes the background (zero mask) and the masked foreground into nodes.
    pub fn encode(&self, g: &mut Graph, p: &Bound, bg: Var, fg: Var, mask: Var) -> Result<Encoded> {
        let fb = self.backbone.forward_unmasked(g, p, bg)?;
        let bg_nodes = self.neh_bg.forward(g, p, fb)?;
        let ff = self.backbone.forward(g, p, fg, mask)?;
        let fg_node = self.neh_fg.forward(g, p, ff)?;
        let b = g.shape(fg_node)[0];
        let fg_node = g.reshape(fg_node, &[b, self.config.node_dim])?;
        Ok(Encoded {
            fg: fg_node,
            bg: bg_nodes,
        })
    }

    /// Completes the graph for latent codes `z: [B, C_z]`: returns placements
    /// `[B, 3]` and attention weights `[B, heads, N]`.
    pub fn complete(&self, g: &mut Graph, p: &Bound, enc: &Encoded, z: Var) -> Result<(Var, Var)> {
        let (x, alpha) = self.attention.forward(g, p, enc.fg, enc.bg)?;
        let t = self.regression.forward(g, p, x, z)?;
        Ok((t, alpha))
    }
}
