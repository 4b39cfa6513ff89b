use super::layers::ConvBnRelu;
use crate::diffcore::{Bound, Graph, ParamRegistry, Rng, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Pools a feature map into grid nodes, one conv stack per grid size.
#[derive(Clone, Debug)]
pub struct NodeHead {
    scales: Vec<(usize, [ConvBnRelu; 3])>,
}

impl NodeHead {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, in_channels: usize, node_dim: usize, grids: &[usize], rng: &mut Rng) -> Self {
        let scales = grids
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                let name = format!("{prefix}.scale{l}");
                let convs = [
                    ConvBnRelu::new(reg, &format!("{name}.conv0"), in_channels, node_dim, rng),
                    ConvBnRelu::new(reg, &format!("{name}.conv1"), node_dim, node_dim, rng),
                    ConvBnRelu::new(reg, &format!("{name}.conv2"), node_dim, node_dim, rng),
                ];
                (n, convs)
            })
            .collect();
        NodeHead { scales }
    }

    pub fn num_nodes(&self) -> usize {
        self.scales.iter().map(|(n, _)| n * n).sum()
    }

    /// `[B, C', h, w]` -> `[B, N, C]`, scales in configured order, row-major
    /// within a scale.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("extract_nodes", &s, &[0, 0, 0, 0]));
        }
        if let Some((n, _)) = self.scales.iter().find(|(n, _)| *n > s[2].min(s[3])) {
            return Err(Error::InvalidGrid {
                grid: *n,
                height: s[2],
                width: s[3],
            });
        }
        let mut parts = Vec::with_capacity(self.scales.len());
        for (n, convs) in &self.scales {
            let mut x = features;
            for c in convs {
                x = c.forward(g, p, x)?;
            }
            let pooled = g.adaptive_avg_pool(x, *n)?;
            let c = g.shape(pooled)[1];
            let flat = g.reshape(pooled, &[s[0], c, n * n])?;
            parts.push(g.permute(flat, &[0, 2, 1])?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 1)
        }
    }
}

/// Position of a node: its scale, grid size and cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeDescriptor {
    pub level: usize,
    pub grid: usize,
    pub row: usize,
    pub col: usize,
}

impl NodeDescriptor {
    /// Pixel cell of this node in a `width x height` image.
    pub fn region(&self, width: usize, height: usize) -> BBox {
        let n = self.grid;
        let (x0, x1) = (self.col * width / n, (self.col + 1) * width / n);
        let (y0, y1) = (self.row * height / n, (self.row + 1) * height / n);
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

pub fn node_descriptors(grids: &[usize]) -> Vec<NodeDescriptor> {
    let mut out = Vec::new();
    for (level, &grid) in grids.iter().enumerate() {
        for row in 0..grid {
            for col in 0..grid {
                out.push(NodeDescriptor { level, grid, row, col });
            }
        }
    }
    out
}

/// The most attended background node of one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionPick {
    pub head: usize,
    /// 1-based node index.
    pub index: usize,
    pub region: BBox,
}

/// Per-head argmax over `alphas` (`heads x N`, row-major) mapped to the pixel
/// cell of the winning node.
pub fn attention_argmax(alphas: &[f64], grids: &[usize], height: usize, width: usize) -> Result<Vec<RegionPick>> {
    let nodes = node_descriptors(grids);
    let n = nodes.len();
    if n == 0 || alphas.len() % n != 0 {
        return Err(Error::shape("attention_argmax", &[alphas.len()], &[n]));
    }
    Ok(alphas
        .chunks(n)
        .enumerate()
        .map(|(head, row)| {
            let (j, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &a)| if a > best.1 { (j, a) } else { best });
            RegionPick {
                head,
                index: j + 1,
                region: nodes[j].region(width, height),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn one_hot(j: usize) -> Vec<f64> {
        let mut a = vec![0.0; 84];
        a[j - 1] = 1.0;
        a
    }

    #[test]
    fn region_mapping() {
        let g = [2, 4, 8];
        let pick = |j| attention_argmax(&one_hot(j), &g, 64, 64).unwrap()[0];
        assert_eq!(pick(1).region, BBox { x: 0, y: 0, w: 32, h: 32 });
        assert_eq!(pick(4).region, BBox { x: 32, y: 32, w: 32, h: 32 });
        assert_eq!(pick(5).region, BBox { x: 0, y: 0, w: 16, h: 16 });
        assert_eq!(pick(20).region, BBox { x: 48, y: 48, w: 16, h: 16 });
        assert_eq!(pick(21).region, BBox { x: 0, y: 0, w: 8, h: 8 });
        assert_eq!(pick(84).region, BBox { x: 56, y: 56, w: 8, h: 8 });
        assert_eq!(pick(84).index, 84);
    }

    #[test]
    fn node_counts() {
        assert_eq!(node_descriptors(&[2, 4, 8]).len(), 84);
        assert_eq!(node_descriptors(&[2, 4]).len(), 20);
        assert_eq!(node_descriptors(&[1]).len(), 1);
    }

    #[test]
    fn head_output_shape_and_grid_check() {
        let mut reg = ParamRegistry::new();
        let mut rng = Rng::new(0);
        let head = NodeHead::new(&mut reg, "neh_bg", 4, 8, &[2, 4], &mut rng);
        assert_eq!(head.num_nodes(), 20);
        let mut g = Graph::new(false);
        let p = reg.bind(&mut g);
        let f = g.constant(rng.uniform_tensor(&[3, 4, 4, 4], -1.0, 1.0));
        let nodes = head.forward(&mut g, &p, f).unwrap();
        assert_eq!(g.shape(nodes), &[3, 20, 8]);
        let small = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(matches!(head.forward(&mut g, &p, small), Err(Error::InvalidGrid { grid: 4, .. })));
    }
}
