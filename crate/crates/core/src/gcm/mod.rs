//! Graph completion generator core: a conv backbone, node extraction heads
//! that pool the feature map into grid nodes, foreground-to-background
//! cross-attention with learned placement encodings, and the regression block
//! that turns the attended node plus a latent code into a placement.

mod attention;
mod backbone;
pub(crate) mod layers;
mod model;
mod nodes;
mod regression;

pub use attention::{CrossAttention, EncodingMode};
pub use backbone::Backbone;
pub use model::{Encoded, Gcm};
pub use nodes::{attention_argmax, node_descriptors, NodeDescriptor, NodeHead, RegionPick};
pub use regression::Regression;

use crate::error::{Error, Result};

/// Architecture hyper-parameters. Stored in checkpoint headers so a load with
/// a different architecture fails loudly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub side: usize,
    /// Output width of each backbone conv block.
    pub backbone_widths: Vec<usize>,
    /// Leading backbone blocks followed by 2x max pooling.
    pub pool_stages: usize,
    /// Node dimension.
    pub node_dim: usize,
    /// Latent code dimension.
    pub latent_dim: usize,
    pub heads: usize,
    /// Background grid sizes, one node scale each.
    pub grids: Vec<usize>,
    /// Width of the two hidden regression layers.
    pub hidden: usize,
    pub encoding: EncodingMode,
    /// One encoding table shared by all heads.
    pub shared_encoding: bool,
    pub disc_widths: Vec<usize>,
}

impl ModelConfig {
    /// 64 px scenes, 128-dim nodes. Three pooling stages leave an 8x8 map so
    /// the finest 8x8 node grid fits.
    pub fn desk() -> Self {
        ModelConfig {
            side: 64,
            backbone_widths: vec![16, 32, 64, 64],
            pool_stages: 3,
            node_dim: 128,
            latent_dim: 256,
            heads: 8,
            grids: vec![2, 4, 8],
            hidden: 256,
            encoding: EncodingMode::Both,
            shared_encoding: false,
            disc_widths: vec![16, 32, 64, 64],
        }
    }

    /// Full-size preset: 256 px, 512-dim nodes, 1024-dim latent and hidden.
    pub fn full() -> Self {
        ModelConfig {
            side: 256,
            backbone_widths: vec![64, 128, 256, 512],
            pool_stages: 4,
            node_dim: 512,
            latent_dim: 1024,
            heads: 8,
            grids: vec![2, 4, 8],
            hidden: 1024,
            encoding: EncodingMode::Both,
            shared_encoding: false,
            disc_widths: vec![64, 128, 256, 512],
        }
    }

    /// Very small model for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            side: 16,
            backbone_widths: vec![4, 8],
            pool_stages: 1,
            node_dim: 16,
            latent_dim: 8,
            heads: 8,
            grids: vec![2],
            hidden: 16,
            encoding: EncodingMode::Both,
            shared_encoding: false,
            disc_widths: vec![4, 4, 8, 8],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn feature_side(&self) -> usize {
        self.side >> self.pool_stages
    }

    pub fn backbone_channels(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&0)
    }

    pub fn head_dim(&self) -> usize {
        self.node_dim / self.heads.max(1)
    }

    pub fn num_nodes(&self) -> usize {
        self.grids.iter().map(|n| n * n).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_widths.is_empty() || self.pool_stages > self.backbone_widths.len() {
            return bad(format!(
                "pool_stages {} needs at least that many backbone blocks ({:?})",
                self.pool_stages, self.backbone_widths
            ));
        }
        if self.side == 0 || self.side % (1 << self.pool_stages) != 0 {
            return bad(format!("side {} is not divisible by 2^{}", self.side, self.pool_stages));
        }
        if self.heads == 0 || self.node_dim % self.heads != 0 {
            return bad(format!("node_dim {} is not divisible by {} heads", self.node_dim, self.heads));
        }
        if self.grids.is_empty() {
            return bad("no background grids".into());
        }
        let fs = self.feature_side();
        if let Some(&n) = self.grids.iter().find(|&&n| n == 0 || n > fs) {
            return Err(Error::InvalidGrid {
                grid: n,
                height: fs,
                width: fs,
            });
        }
        if self.disc_widths.is_empty() || self.latent_dim == 0 || self.hidden == 0 {
            return bad("empty discriminator, latent or hidden width".into());
        }
        Ok(())
    }

    /// `key=value` lines describing the architecture.
    pub fn header(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "side={}\nbackbone_widths={}\npool_stages={}\nnode_dim={}\nlatent_dim={}\nheads={}\ngrids={}\nhidden={}\nencoding={}\nshared_encoding={}\ndisc_widths={}\n",
            self.side,
            list(&self.backbone_widths),
            self.pool_stages,
            self.node_dim,
            self.latent_dim,
            self.heads,
            list(&self.grids),
            self.hidden,
            self.encoding.name(),
            self.shared_encoding,
            list(&self.disc_widths),
        )
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line '{line}'")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad value for {k}: '{v}'")))
            };
            let list = |v: &str| v.split(',').map(num).collect::<Result<Vec<_>>>();
            match k {
                "side" => cfg.side = num(v)?,
                "backbone_widths" => cfg.backbone_widths = list(v)?,
                "pool_stages" => cfg.pool_stages = num(v)?,
                "node_dim" => cfg.node_dim = num(v)?,
                "latent_dim" => cfg.latent_dim = num(v)?,
                "heads" => cfg.heads = num(v)?,
                "grids" => cfg.grids = list(v)?,
                "hidden" => cfg.hidden = num(v)?,
                "encoding" => cfg.encoding = EncodingMode::parse(v).map_err(|e| Error::Checkpoint(e.to_string()))?,
                "shared_encoding" => {
                    cfg.shared_encoding = v
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad value for {k}: '{v}'")))?
                }
                "disc_widths" => cfg.disc_widths = list(v)?,
                _ => continue,
            }
            seen += 1;
        }
        if seen < 11 {
            return Err(Error::Checkpoint("incomplete architecture header".into()));
        }
        Ok(cfg)
    }
}
