//! Placement geometry: the `t = [scale, x, y]` parameterisation, its affine
//! matrix, warping, compositing, and recovery of `t` from a placed mask.
//!
//! Coordinates follow one convention everywhere: normalized coordinates
//! address pixel centers in `[-1, 1]`, x rightward and y downward, and warps
//! are inverse maps (output pixel -> source pixel), read bilinearly with zero
//! padding.

use crate::diffcore::{sample, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Clamp margin keeping every placement field strictly inside (0, 1).
pub const PARAM_EPS: f64 = 1e-4;

/// Placement of a foreground canvas over the background: `t_r` scales both
/// sides, `t_x`/`t_y` position the scaled box relative to the free space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams {
    t_r: f64,
    t_x: f64,
    t_y: f64,
}

impl TransformParams {
    /// Builds a placement, clamping every field to `[eps, 1 - eps]`.
    pub fn new(t_r: f64, t_x: f64, t_y: f64) -> Self {
        let c = |v: f64| v.clamp(PARAM_EPS, 1.0 - PARAM_EPS);
        TransformParams {
            t_r: c(t_r),
            t_x: c(t_x),
            t_y: c(t_y),
        }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn t_r(&self) -> f64 {
        self.t_r
    }

    pub fn t_x(&self) -> f64 {
        self.t_x
    }

    pub fn t_y(&self) -> f64 {
        self.t_y
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.t_r, self.t_x, self.t_y]
    }

    /// Pixel box `(x, y, w, h)` the scaled canvas occupies in a `width x height`
    /// frame, in continuous pixel units.
    pub fn placed_box(&self, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let (wf, hf) = (width as f64, height as f64);
        let w = self.t_r * wf;
        let h = self.t_r * hf;
        (self.t_x * (wf - w), self.t_y * (hf - h), w, h)
    }

    pub fn max_abs_diff(&self, other: &TransformParams) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// 2x3 inverse-warp matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix(pub [[f64; 3]; 2]);

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn flat(&self) -> [f64; 6] {
        let [a, b] = self.0;
        [a[0], a[1], a[2], b[0], b[1], b[2]]
    }
}

/// Maps a placement to the warp that realises it.
pub fn theta_from_params(t: TransformParams) -> AffineMatrix {
    let s = 1.0 / t.t_r;
    AffineMatrix([
        [s, 0.0, (1.0 - 2.0 * t.t_x) * (s - 1.0)],
        [0.0, s, (1.0 - 2.0 * t.t_y) * (s - 1.0)],
    ])
}

/// Inverse of [`theta_from_params`] for matrices with a non-unit scale.
pub fn params_from_theta(theta: &AffineMatrix) -> TransformParams {
    let s = theta.0[0][0];
    let t_r = 1.0 / s;
    let t_x = (1.0 - theta.0[0][2] / (s - 1.0)) / 2.0;
    let t_y = (1.0 - theta.0[1][2] / (s - 1.0)) / 2.0;
    TransformParams { t_r, t_x, t_y }
}

/// `C x H x W` image, mask or feature plane stack.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PlanarTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape("planar", &[channels, height, width], &[data.len()]));
        }
        Ok(PlanarTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        PlanarTensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_size(&self, other: &PlanarTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `[1, C, H, W]` tensor view (copied).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone()).expect("consistent shape")
    }

    /// Extracts sample `index` of a `[N, C, H, W]` tensor.
    pub fn from_batch(t: &Tensor, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(Error::shape("from_batch", s, &[index]));
        }
        let per = s[1] * s[2] * s[3];
        Self::new(s[1], s[2], s[3], t.data()[index * per..(index + 1) * per].to_vec())
    }

    /// Stacks same-sized planes into `[N, C, H, W]`.
    pub fn batch(items: &[&PlanarTensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::shape("batch", &[], &[]))?;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for it in items {
            if it.channels != first.channels || !it.same_size(first) {
                return Err(Error::shape(
                    "batch",
                    &[first.channels, first.height, first.width],
                    &[it.channels, it.height, it.width],
                ));
            }
            data.extend_from_slice(&it.data);
        }
        Tensor::new(&[items.len(), first.channels, first.height, first.width], data)
    }

    /// Concatenates the channels of two same-sized planes.
    pub fn stack_channels(&self, other: &PlanarTensor) -> Result<PlanarTensor> {
        if !self.same_size(other) {
            return Err(Error::shape(
                "stack_channels",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        PlanarTensor::new(self.channels + other.channels, self.height, self.width, data)
    }
}

/// Axis-aligned pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }
}

/// Bilinear inverse warp of every channel of `src` through `theta`.
pub fn affine_sample(src: &PlanarTensor, theta: &AffineMatrix) -> PlanarTensor {
    let mut out = vec![0.0; src.data.len()];
    sample::warp_forward(&src.data, src.channels, src.height, src.width, &theta.flat(), &mut out);
    PlanarTensor {
        channels: src.channels,
        height: src.height,
        width: src.width,
        data: out,
    }
}

/// Pastes `fg` (cut out by `mask`) into `bg` at placement `t`. Returns the
/// composite image and the placed mask.
pub fn composite(
    bg: &PlanarTensor,
    fg: &PlanarTensor,
    mask: &PlanarTensor,
    t: TransformParams,
) -> Result<(PlanarTensor, PlanarTensor)> {
    if mask.channels != 1 || !bg.same_size(fg) || !bg.same_size(mask) || bg.channels != fg.channels {
        return Err(Error::shape(
            "composite",
            &[bg.channels, bg.height, bg.width],
            &[fg.channels, mask.channels, fg.height, fg.width],
        ));
    }
    let theta = theta_from_params(t);
    let placed_mask = affine_sample(mask, &theta);
    let placed_fg = affine_sample(fg, &theta);
    let hw = bg.height * bg.width;
    let mut out = bg.data.clone();
    for c in 0..bg.channels {
        for k in 0..hw {
            let i = c * hw + k;
            out[i] = bg.data[i] + placed_mask.data[k] * (placed_fg.data[i] - bg.data[i]);
        }
    }
    Ok((
        PlanarTensor {
            channels: bg.channels,
            height: bg.height,
            width: bg.width,
            data: out,
        },
        placed_mask,
    ))
}

/// Differentiable warp matrices `[B, 2, 3]` from placements `t: [B, 3]`.
pub fn theta_graph(g: &mut Graph, t: Var) -> Result<Var> {
    let shape = g.shape(t).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::shape("theta_graph", &shape, &[0, 3]));
    }
    let b = shape[0];
    let r = g.slice(t, 1, 0, 1)?;
    let x = g.slice(t, 1, 1, 1)?;
    let y = g.slice(t, 1, 2, 1)?;
    let inv = g.recip(r);
    let inv_m1 = g.shift(inv, -1.0);
    let sx = g.scale(x, -2.0);
    let sx = g.shift(sx, 1.0);
    let tx = g.mul(sx, inv_m1)?;
    let sy = g.scale(y, -2.0);
    let sy = g.shift(sy, 1.0);
    let ty = g.mul(sy, inv_m1)?;
    let zero = g.constant(Tensor::zeros(&[b, 1]));
    let flat = g.concat(&[inv, zero, tx, zero, inv, ty], 1)?;
    g.reshape(flat, &[b, 2, 3])
}

/// Differentiable batched [`composite`]: `bg, fg: [B, C, H, W]`,
/// `mask: [B, 1, H, W]`, `t: [B, 3]`. Returns `(image, placed_mask)`.
pub fn composite_graph(g: &mut Graph, bg: Var, fg: Var, mask: Var, t: Var) -> Result<(Var, Var)> {
    let sb = g.shape(bg).to_vec();
    if sb.len() != 4 || g.shape(fg) != sb.as_slice() || g.shape(mask) != [sb[0], 1, sb[2], sb[3]] {
        return Err(Error::shape("composite_graph", &sb, g.shape(mask)));
    }
    let theta = theta_graph(g, t)?;
    let placed_mask = g.grid_sample(mask, theta)?;
    let placed_fg = g.grid_sample(fg, theta)?;
    let m = g.expand(placed_mask, 1, sb[1])?;
    let diff = g.sub(placed_fg, bg)?;
    let md = g.mul(m, diff)?;
    let image = g.add(bg, md)?;
    Ok((image, placed_mask))
}

/// Tightest box around all pixels `>= threshold`.
pub fn bbox_from_mask(mask: &PlanarTensor, threshold: f64) -> Result<BBox> {
    let (w, h) = (mask.width, mask.height);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.data[y * w + x] >= threshold {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyMask { threshold });
    }
    Ok(BBox {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Placement that reproduces box `b` for a foreground filling its canvas.
/// An axis the box spans completely is centred (0.5).
pub fn tgt_from_bbox(b: BBox, width: usize, height: usize) -> TransformParams {
    let (wf, hf) = (width as f64, height as f64);
    let t_r = (b.w as f64 / wf).max(b.h as f64 / hf);
    let t_x = if b.w < width {
        b.x as f64 / (wf - b.w as f64)
    } else {
        0.5
    };
    let t_y = if b.h < height {
        b.y as f64 / (hf - b.h as f64)
    } else {
        0.5
    };
    TransformParams::new(t_r, t_x, t_y)
}

/// Bilinear resize sampling pixel centers, clamping at the borders.
pub fn resize_bilinear(src: &PlanarTensor, width: usize, height: usize) -> PlanarTensor {
    let (sw, sh) = (src.width, src.height);
    let mut out = vec![0.0; src.channels * width * height];
    let coord = |i: usize, dst: usize, srcn: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * srcn as f64 / dst as f64 - 0.5).clamp(0.0, (srcn - 1) as f64);
        let s0 = s.floor() as usize;
        let s1 = (s0 + 1).min(srcn - 1);
        (s0, s1, s - s0 as f64)
    };
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, sh);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, sw);
            for c in 0..src.channels {
                let v = (1.0 - fy) * ((1.0 - fx) * src.get(c, y0, x0) + fx * src.get(c, y0, x1))
                    + fy * ((1.0 - fx) * src.get(c, y1, x0) + fx * src.get(c, y1, x1));
                out[(c * height + y) * width + x] = v;
            }
        }
    }
    PlanarTensor {
        channels: src.channels,
        height,
        width,
        data: out,
    }
}

/// Places `src` at `(left, top)` inside a zero canvas.
fn pad_into(src: &PlanarTensor, width: usize, height: usize, left: usize, top: usize) -> PlanarTensor {
    let mut out = PlanarTensor::filled(src.channels, height, width, 0.0);
    for c in 0..src.channels {
        for y in 0..src.height {
            for x in 0..src.width {
                out.set(c, y + top, x + left, src.get(c, y, x));
            }
        }
    }
    out
}

/// Brings a raw foreground (with mask) and background to `side x side`.
///
/// The foreground keeps its aspect ratio relative to the background: it is
/// resized so that, once the background is stretched to a square, the object
/// keeps its true proportions, then zero-padded evenly on the short axis. The
/// background is resized directly.
pub fn preprocess_pair(
    fg: &PlanarTensor,
    mask: &PlanarTensor,
    bg: &PlanarTensor,
    side: usize,
) -> Result<(PlanarTensor, PlanarTensor, PlanarTensor)> {
    if !fg.same_size(mask) || mask.channels != 1 {
        return Err(Error::shape(
            "preprocess_pair",
            &[fg.channels, fg.height, fg.width],
            &[mask.channels, mask.height, mask.width],
        ));
    }
    let (fw, fh) = (fg.width as f64, fg.height as f64);
    let (bw, bh) = (bg.width as f64, bg.height as f64);
    let s = side as f64;
    let (nw, nh) = if fw / fh > bw / bh {
        (side, ((s * fh * bw) / (fw * bh)).round().clamp(1.0, s) as usize)
    } else {
        (((s * fw * bh) / (fh * bw)).round().clamp(1.0, s) as usize, side)
    };
    let left = (side - nw) / 2;
    let top = (side - nh) / 2;
    let fg_out = pad_into(&resize_bilinear(fg, nw, nh), side, side, left, top);
    let mask_out = pad_into(&resize_bilinear(mask, nw, nh), side, side, left, top);
    let bg_out = resize_bilinear(bg, side, side);
    Ok((fg_out, mask_out, bg_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn theta_identity_when_full_scale() {
        let th = theta_from_params(TransformParams::new(1.0, 0.3, 0.7));
        assert!(close(th.0[0][0], 1.0, 2e-4));
        assert!(close(th.0[1][1], 1.0, 2e-4));
        assert!(th.0[0][2].abs() < 1e-4 && th.0[1][2].abs() < 1e-4);
    }

    #[test]
    fn theta_centered_half_scale() {
        let th = theta_from_params(TransformParams::new(0.5, 0.5, 0.5));
        assert_eq!(th, AffineMatrix([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]));
    }

    #[test]
    fn theta_top_left_half_scale() {
        let th = theta_from_params(TransformParams::new(0.5, 0.0, 0.0));
        // clamped to eps, so the translation is (1 - 2e-4)
        assert!(close(th.0[0][2], 1.0, 1e-3));
        assert!(close(th.0[1][2], 1.0, 1e-3));
        let exact = AffineMatrix([[2.0, 0.0, 1.0], [0.0, 2.0, 1.0]]);
        let t = TransformParams {
            t_r: 0.5,
            t_x: 0.0,
            t_y: 0.0,
        };
        assert_eq!(theta_from_params(t), exact);
    }

    #[test]
    fn construction_clamps() {
        let t = TransformParams::new(0.0, 1.0, -3.0);
        assert_eq!(t.to_array(), [PARAM_EPS, 1.0 - PARAM_EPS, PARAM_EPS]);
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let mut src = PlanarTensor::filled(3, 7, 9, 0.0);
        for (k, v) in src.data_mut().iter_mut().enumerate() {
            *v = ((k * 37) % 101) as f64 / 101.0;
        }
        let out = affine_sample(&src, &AffineMatrix::IDENTITY);
        assert_eq!(out, src);
    }

    #[test]
    fn empty_mask_keeps_background() {
        let bg = PlanarTensor::filled(3, 16, 16, 0.3);
        let fg = PlanarTensor::filled(3, 16, 16, 0.9);
        let mask = PlanarTensor::filled(1, 16, 16, 0.0);
        let (img, m) = composite(&bg, &fg, &mask, TransformParams::new(0.4, 0.2, 0.9)).unwrap();
        assert_eq!(img, bg);
        assert!(m.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_cover_reproduces_foreground() {
        let bg = PlanarTensor::filled(3, 32, 32, 0.1);
        let mut fg = PlanarTensor::filled(3, 32, 32, 0.0);
        for (k, v) in fg.data_mut().iter_mut().enumerate() {
            *v = (k % 32) as f64 / 31.0;
        }
        let mask = PlanarTensor::filled(1, 32, 32, 1.0);
        // limit of the clamp margin going to zero
        let t = TransformParams {
            t_r: 1.0 - 1e-9,
            t_x: 0.3,
            t_y: 0.7,
        };
        let (img, _) = composite(&bg, &fg, &mask, t).unwrap();
        for (a, b) in img.data().iter().zip(fg.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        // with the clamp in place only the outermost ring leaks background
        let (img, _) = composite(&bg, &fg, &mask, TransformParams::new(1.0, 0.3, 0.7)).unwrap();
        for c in 0..3 {
            for y in 1..31 {
                for x in 1..31 {
                    assert!((img.get(c, y, x) - fg.get(c, y, x)).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn bbox_single_pixel_and_full() {
        let mut m = PlanarTensor::filled(1, 64, 64, 0.0);
        m.set(0, 20, 10, 1.0);
        assert_eq!(bbox_from_mask(&m, 0.5).unwrap(), BBox { x: 10, y: 20, w: 1, h: 1 });
        let full = PlanarTensor::filled(1, 64, 64, 1.0);
        assert_eq!(bbox_from_mask(&full, 0.5).unwrap(), BBox { x: 0, y: 0, w: 64, h: 64 });
        let empty = PlanarTensor::filled(1, 8, 8, 0.2);
        assert!(matches!(bbox_from_mask(&empty, 0.5), Err(Error::EmptyMask { .. })));
    }

    #[test]
    fn tgt_from_bbox_examples() {
        let t = tgt_from_bbox(BBox { x: 64, y: 96, w: 128, h: 64 }, 256, 256);
        assert_eq!(t.to_array(), [0.5, 0.5, 0.5]);
        let t = tgt_from_bbox(BBox { x: 0, y: 0, w: 256, h: 256 }, 256, 256);
        assert_eq!(t.to_array(), [1.0 - PARAM_EPS, 0.5, 0.5]);
    }

    #[test]
    fn preprocess_wide_foreground_pads_vertically() {
        let fg = PlanarTensor::filled(3, 200, 400, 0.5);
        let mask = PlanarTensor::filled(1, 200, 400, 1.0);
        let bg = PlanarTensor::filled(3, 300, 300, 0.2);
        let (f, m, b) = preprocess_pair(&fg, &mask, &bg, 256).unwrap();
        assert_eq!((f.width(), f.height(), b.width(), b.height()), (256, 256, 256, 256));
        let bb = bbox_from_mask(&m, 0.5).unwrap();
        assert_eq!(bb, BBox { x: 0, y: 64, w: 256, h: 128 });
    }

    #[test]
    fn preprocess_tall_foreground_pads_horizontally() {
        let fg = PlanarTensor::filled(3, 400, 100, 0.5);
        let mask = PlanarTensor::filled(1, 400, 100, 1.0);
        let bg = PlanarTensor::filled(3, 100, 200, 0.2);
        let (_, m, _) = preprocess_pair(&fg, &mask, &bg, 256).unwrap();
        let bb = bbox_from_mask(&m, 0.5).unwrap();
        assert_eq!(bb, BBox { x: 112, y: 0, w: 32, h: 256 });
    }

    #[test]
    fn preprocess_equal_ratios_no_padding() {
        let fg = PlanarTensor::filled(3, 256, 256, 0.5);
        let mask = PlanarTensor::filled(1, 256, 256, 1.0);
        let bg = PlanarTensor::filled(3, 256, 256, 0.2);
        let (f, m, b) = preprocess_pair(&fg, &mask, &bg, 256).unwrap();
        assert_eq!(f, fg);
        assert_eq!(m, mask);
        assert_eq!(b, bg);
    }
}
