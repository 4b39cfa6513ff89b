//! Synthetic placement world: a sky/floor scene with occupying boxes, a
//! solid foreground, and a rule-based judge of plausible placements.
//!
//! A placement is plausible when the placed object stands on the floor, does
//! not collide with an occupier, and has the size the scene's perspective rule
//! expects for its bottom row. The floor shading shows that rule: the red
//! channel at row `y` is the expected scale of an object whose bottom edge is
//! at `y + 1`. Every rendered value is a multiple of 1/255, so PNG round trips
//! are exact.

mod dataset;

pub use dataset::{gen_dataset, AnnotatedSample, Dataset, DatasetOptions, Label, SceneRecord};

use crate::diffcore::Rng;
use crate::geometry::{affine_sample, bbox_from_mask, theta_from_params, BBox, PlanarTensor, TransformParams};

/// Overlap with any occupier, as a fraction of the object's mask mass, that
/// still counts as clear.
pub const MAX_OVERLAP: f64 = 0.02;
/// Threshold turning a placed soft mask into a box.
pub const MASK_THRESHOLD: f64 = 0.5;

const OCCUPIER_PALETTE: [[u8; 3]; 6] = [
    [230, 60, 60],
    [60, 200, 80],
    [240, 200, 40],
    [200, 80, 220],
    [40, 200, 220],
    [250, 140, 20],
];

const FG_PALETTE: [[u8; 3]; 5] = [[255, 255, 255], [20, 20, 20], [120, 40, 200], [255, 105, 180], [0, 128, 128]];

/// Layout and rules of one synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub side: usize,
    /// First floor row; rows above are sky.
    pub floor_top: usize,
    pub occupiers: Vec<BBox>,
    pub occupier_colors: Vec<[u8; 3]>,
    /// Expected scale for bottom row `b` is `s0 + s1 * b / side`.
    pub s0: f64,
    pub s1: f64,
    pub tau: f64,
    pub sky: [u8; 3],
    /// Green and blue of the floor; red carries the size rule.
    pub floor_gb: [u8; 2],
}

fn q(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn rgb(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

impl SceneSpec {
    /// Expected scale of an object whose bottom edge is at pixel row `bottom`.
    pub fn expected_scale(&self, bottom: f64) -> f64 {
        self.s0 + self.s1 * bottom / self.side as f64
    }

    pub fn is_valid(&self) -> bool {
        self.floor_top < self.side
            && self.s0 > 0.0
            && self.s0 + self.s1 < 1.0
            && self.tau > 0.0
            && self.occupiers.len() == self.occupier_colors.len()
            && self
                .occupiers
                .iter()
                .all(|o| o.fits(self.side, self.side) && o.y >= self.floor_top)
    }

    pub fn render(&self) -> PlanarTensor {
        let s = self.side;
        let mut bg = PlanarTensor::filled(3, s, s, 0.0);
        let sky = rgb(self.sky);
        for y in 0..s {
            let px = if y < self.floor_top {
                sky
            } else {
                [
                    q(self.expected_scale((y + 1) as f64)),
                    self.floor_gb[0] as f64 / 255.0,
                    self.floor_gb[1] as f64 / 255.0,
                ]
            };
            for x in 0..s {
                for (c, v) in px.iter().enumerate() {
                    bg.set(c, y, x, *v);
                }
            }
        }
        for (o, col) in self.occupiers.iter().zip(&self.occupier_colors) {
            let col = rgb(*col);
            for y in o.y..o.bottom() {
                for x in o.x..o.right() {
                    for (c, v) in col.iter().enumerate() {
                        bg.set(c, y, x, *v);
                    }
                }
            }
        }
        bg
    }
}

fn color_in(rng: &mut Rng, lo: [u8; 3], hi: [u8; 3]) -> [u8; 3] {
    [0, 1, 2].map(|c| rng.index(lo[c] as usize, hi[c] as usize + 1) as u8)
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x < b.right() && b.x < a.right() && a.y < b.bottom() && b.y < a.bottom()
}

/// Draws a scene layout and renders its background.
pub fn gen_scene(rng: &mut Rng, side: usize) -> (SceneSpec, PlanarTensor) {
    let sf = side as f64;
    let floor_top = rng.range(0.4 * sf, 0.7 * sf).round() as usize;
    let s0 = rng.range(0.1, 0.2);
    let s1 = rng.range(0.2, 0.4);
    let tau = rng.range(0.05, 0.1);
    let sky = color_in(rng, [90, 140, 200], [150, 200, 255]);
    let floor_gb = [rng.index(60, 121) as u8, rng.index(20, 81) as u8];
    let mut spec = SceneSpec {
        side,
        floor_top,
        occupiers: Vec::new(),
        occupier_colors: Vec::new(),
        s0,
        s1,
        tau,
        sky,
        floor_gb,
    };
    let mut palette: Vec<usize> = (0..OCCUPIER_PALETTE.len()).collect();
    rng.shuffle(&mut palette);
    let count = rng.index(0, 4);
    let min_depth = 6.min(side - floor_top);
    for k in 0..count {
        for _ in 0..20 {
            let bottom = rng.index(floor_top + min_depth, side + 1);
            let scale = spec.expected_scale(bottom as f64);
            let h = ((scale * sf * rng.range(0.5, 1.0)).round() as usize).clamp(3, (bottom - floor_top).max(3));
            let w = ((scale * sf * rng.range(0.5, 1.2)).round() as usize).clamp(3, side);
            if h > bottom - floor_top {
                continue;
            }
            let x = rng.index(0, side - w + 1);
            let b = BBox {
                x,
                y: bottom - h,
                w,
                h,
            };
            if spec.occupiers.iter().any(|o| overlaps(o, &b)) {
                continue;
            }
            spec.occupiers.push(b);
            spec.occupier_colors.push(OCCUPIER_PALETTE[palette[k]]);
            break;
        }
    }
    let bg = spec.render();
    (spec, bg)
}

/// Solid foreground filling its `side x side` canvas: a rectangle or the
/// inscribed ellipse. Returns `(image, binary mask)`.
pub fn render_fg(rng: &mut Rng, side: usize) -> (PlanarTensor, PlanarTensor) {
    let ellipse = rng.uniform() < 0.5;
    let color = rgb(FG_PALETTE[rng.index(0, FG_PALETTE.len())]);
    let mut fg = PlanarTensor::filled(3, side, side, 0.0);
    let mut mask = PlanarTensor::filled(1, side, side, 0.0);
    let r = side as f64 / 2.0;
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f64 + 0.5 - r) / r;
            let dy = (y as f64 + 0.5 - r) / r;
            if !ellipse || dx * dx + dy * dy <= 1.0 {
                mask.set(0, y, x, 1.0);
                for (c, v) in color.iter().enumerate() {
                    fg.set(c, y, x, *v);
                }
            }
        }
    }
    (fg, mask)
}

/// Per-rule outcome of judging one placement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub bbox: Option<BBox>,
    pub on_floor: bool,
    pub clear: bool,
    pub size_ok: bool,
}

impl Verdict {
    pub fn plausible(&self) -> bool {
        self.on_floor && self.clear && self.size_ok
    }
}

/// Judges an already placed mask (`1 x side x side`).
pub fn judge_placed(scene: &SceneSpec, placed: &PlanarTensor) -> Verdict {
    let Ok(bb) = bbox_from_mask(placed, MASK_THRESHOLD) else {
        return Verdict {
            bbox: None,
            on_floor: false,
            clear: false,
            size_ok: false,
        };
    };
    let side = scene.side;
    let bottom = bb.bottom();
    let on_floor = bottom >= scene.floor_top && bottom <= side;
    let area = placed.sum();
    let clear = scene.occupiers.iter().all(|o| {
        let mut inside = 0.0;
        for y in o.y..o.bottom() {
            for x in o.x..o.right() {
                inside += placed.get(0, y, x);
            }
        }
        inside / area < MAX_OVERLAP
    });
    let scale = bb.w.max(bb.h) as f64 / side as f64;
    let size_ok = (scale - scene.expected_scale(bottom as f64)).abs() <= scene.tau;
    Verdict {
        bbox: Some(bb),
        on_floor,
        clear,
        size_ok,
    }
}

/// Full verdict for placing `mask` at `t`.
pub fn judge(scene: &SceneSpec, t: TransformParams, mask: &PlanarTensor) -> Verdict {
    judge_placed(scene, &affine_sample(mask, &theta_from_params(t)))
}

/// Whether placing `mask` at `t` in `scene` is plausible.
pub fn oracle(scene: &SceneSpec, t: TransformParams, mask: &PlanarTensor) -> bool {
    judge(scene, t, mask).plausible()
}

/// Monte-Carlo rate of plausible placements under uniform `t`.
pub fn uniform_positive_rate(scene: &SceneSpec, mask: &PlanarTensor, draws: usize, rng: &mut Rng) -> f64 {
    let hits = (0..draws)
        .filter(|_| {
            let t = TransformParams::new(rng.uniform(), rng.uniform(), rng.uniform());
            oracle(scene, t, mask)
        })
        .count();
    hits as f64 / draws as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tgt_from_bbox;

    fn empty_scene() -> SceneSpec {
        SceneSpec {
            side: 64,
            floor_top: 32,
            occupiers: vec![],
            occupier_colors: vec![],
            s0: 0.15,
            s1: 0.3,
            tau: 0.06,
            sky: [120, 170, 230],
            floor_gb: [90, 50],
        }
    }

    #[test]
    fn scenes_are_seeded_and_valid() {
        let (a, ia) = gen_scene(&mut Rng::new(7), 64);
        let (b, ib) = gen_scene(&mut Rng::new(7), 64);
        assert_eq!(a, b);
        assert_eq!(ia, ib);
        for seed in 0..1000 {
            let (s, _) = gen_scene(&mut Rng::new(seed), 64);
            assert!(s.is_valid(), "seed {seed}: {s:?}");
            assert!((25..=45).contains(&s.floor_top));
            assert!((0.1..=0.2).contains(&s.s0) && (0.2..=0.4).contains(&s.s1));
            assert!((0.05..=0.1).contains(&s.tau));
            assert!(s.occupiers.len() <= 3);
        }
    }

    #[test]
    fn pixels_are_eight_bit() {
        let (_, bg) = gen_scene(&mut Rng::new(3), 64);
        let (fg, m) = render_fg(&mut Rng::new(3), 64);
        for v in bg.data().iter().chain(fg.data()).chain(m.data()) {
            assert_eq!((v * 255.0).round() / 255.0, *v);
        }
    }

    #[test]
    fn foreground_fills_its_frame() {
        for seed in 0..20 {
            let (_, m) = render_fg(&mut Rng::new(seed), 64);
            assert!(m.sum() >= 0.6 * 64.0 * 64.0);
            assert_eq!(bbox_from_mask(&m, 0.5).unwrap(), BBox { x: 0, y: 0, w: 64, h: 64 });
        }
    }

    #[test]
    fn centred_on_floor_at_rule_size_is_plausible() {
        let scene = empty_scene();
        let (_, mask) = render_fg(&mut Rng::new(0), 64);
        // bottom at row 64 with t_y -> 1 means expected scale s0 + s1
        let t = TransformParams::new(0.45, 0.5, 1.0);
        let v = judge(&scene, t, &mask);
        assert!(v.plausible(), "{v:?}");
    }

    #[test]
    fn each_rule_can_fail_alone() {
        let scene = empty_scene();
        let (_, mask) = render_fg(&mut Rng::new(0), 64);
        // in the sky
        let v = judge(&scene, TransformParams::new(0.2, 0.5, 0.0), &mask);
        assert!(!v.on_floor);
        // far too small for the bottom row
        let v = judge(&scene, TransformParams::new(0.1, 0.5, 1.0), &mask);
        assert!(v.on_floor && !v.size_ok);
        // collides with an occupier
        let mut busy = scene.clone();
        busy.occupiers.push(BBox { x: 20, y: 40, w: 24, h: 24 });
        busy.occupier_colors.push([230, 60, 60]);
        let v = judge(&busy, TransformParams::new(0.45, 0.5, 1.0), &mask);
        assert!(v.on_floor && v.size_ok && !v.clear);
    }

    #[test]
    fn oracle_survives_bbox_round_trip() {
        let mut rng = Rng::new(11);
        let (scene, _) = gen_scene(&mut rng, 64);
        let (_, mask) = render_fg(&mut rng, 64);
        let mut agree = 0;
        for _ in 0..1000 {
            let t = TransformParams::new(rng.uniform(), rng.uniform(), rng.uniform());
            let direct = oracle(&scene, t, &mask);
            let placed = affine_sample(&mask, &theta_from_params(t));
            let recovered = match bbox_from_mask(&placed, MASK_THRESHOLD) {
                Ok(bb) => oracle(&scene, tgt_from_bbox(bb, 64, 64), &mask),
                Err(_) => false,
            };
            agree += usize::from(direct == recovered);
        }
        assert!(agree >= 990, "agreement {agree}/1000");
    }

    #[test]
    fn uniform_placements_are_rarely_plausible() {
        let mut rng = Rng::new(5);
        let mut total = 0.0;
        for _ in 0..20 {
            let (scene, _) = gen_scene(&mut rng, 64);
            let (_, mask) = render_fg(&mut rng, 64);
            total += uniform_positive_rate(&scene, &mask, 200, &mut rng);
        }
        assert!(total / 20.0 < 0.35);
    }
}
