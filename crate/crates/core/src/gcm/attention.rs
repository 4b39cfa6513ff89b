use std::fmt;

use super::layers::Linear;
use crate::diffcore::{Bound, Graph, ParamId, ParamRegistry, Rng, Var};
use crate::error::{Error, Result};

/// Which learned per-node offsets are added to keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingMode {
    Both,
    KeyOnly,
    ValueOnly,
    Off,
}

impl EncodingMode {
    pub fn name(self) -> &'static str {
        match self {
            EncodingMode::Both => "both",
            EncodingMode::KeyOnly => "key",
            EncodingMode::ValueOnly => "value",
            EncodingMode::Off => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(EncodingMode::Both),
            "key" => Ok(EncodingMode::KeyOnly),
            "value" => Ok(EncodingMode::ValueOnly),
            "none" => Ok(EncodingMode::Off),
            other => Err(Error::Config(format!("unknown encoding mode '{other}'"))),
        }
    }

    pub fn keys(self) -> bool {
        matches!(self, EncodingMode::Both | EncodingMode::KeyOnly)
    }

    pub fn values(self) -> bool {
        matches!(self, EncodingMode::Both | EncodingMode::ValueOnly)
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Multi-head attention from one foreground node to `N` background nodes.
///
/// Query/key/value projections are `C x C` matrices whose column blocks are
/// the heads. Encoding tables are `N x C` (column block per head), or `N x d`
/// when shared by all heads.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub dim: usize,
    pub nodes: usize,
    pub shared: bool,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub key_enc: Option<ParamId>,
    pub value_enc: Option<ParamId>,
    pub out: Linear,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        heads: usize,
        nodes: usize,
        mode: EncodingMode,
        shared: bool,
        rng: &mut Rng,
    ) -> Self {
        let head_dim = dim / heads;
        let table = if shared { [nodes, head_dim] } else { [nodes, dim] };
        let query = Linear::without_bias(reg, &format!("{prefix}.query"), dim, dim, 1.0, rng);
        let key = Linear::without_bias(reg, &format!("{prefix}.key"), dim, dim, 1.0, rng);
        let value = Linear::without_bias(reg, &format!("{prefix}.value"), dim, dim, 1.0, rng);
        let key_enc = mode
            .keys()
            .then(|| reg.add_normal(&format!("{prefix}.key_enc"), &table, 0.02, rng));
        let value_enc = mode
            .values()
            .then(|| reg.add_normal(&format!("{prefix}.value_enc"), &table, 0.02, rng));
        let out = Linear::new(reg, &format!("{prefix}.out"), dim, dim, 1.0, rng);
        CrossAttention {
            heads,
            dim,
            nodes,
            shared,
            query,
            key,
            value,
            key_enc,
            value_enc,
            out,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Encoding table widened to `N x C`.
    fn table(&self, g: &mut Graph, p: &Bound, id: ParamId) -> Result<Var> {
        let t = p.var(id);
        if !self.shared {
            return Ok(t);
        }
        let d = self.head_dim();
        let t = g.reshape(t, &[self.nodes, 1, d])?;
        let t = g.expand(t, 1, self.heads)?;
        g.reshape(t, &[self.nodes, self.dim])
    }

    /// `fg: [B, C]`, `bg: [B, N, C]` -> (`[B, C]`, attention `[B, heads, N]`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, fg: Var, bg: Var) -> Result<(Var, Var)> {
        let (sf, sb) = (g.shape(fg).to_vec(), g.shape(bg).to_vec());
        if sf.len() != 2 || sf[1] != self.dim || sb != [sf[0], self.nodes, self.dim] {
            return Err(Error::shape("cross_attention", &sf, &sb));
        }
        let (b, n, h, d) = (sf[0], self.nodes, self.heads, self.head_dim());

        let q = self.query.forward(g, p, fg)?;
        let q = g.reshape(q, &[b * h, 1, d])?;

        let mut k = self.key.forward(g, p, bg)?;
        if let Some(id) = self.key_enc {
            let t = self.table(g, p, id)?;
            k = g.add_suffix(k, t)?;
        }
        let k = g.reshape(k, &[b, n, h, d])?;
        let k = g.permute(k, &[0, 2, 3, 1])?;
        let k = g.reshape(k, &[b * h, d, n])?;

        let mut v = self.value.forward(g, p, bg)?;
        if let Some(id) = self.value_enc {
            let t = self.table(g, p, id)?;
            v = g.add_suffix(v, t)?;
        }
        let v = g.reshape(v, &[b, n, h, d])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let v = g.reshape(v, &[b * h, n, d])?;

        let logits = g.bmm(q, k)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let alpha = g.softmax(logits, 2)?;
        let o = g.bmm(alpha, v)?;
        let o = g.reshape(o, &[b, self.dim])?;
        let x = self.out.forward(g, p, o)?;
        let alpha = g.reshape(alpha, &[b, h, n])?;
        Ok((x, alpha))
    }
}
