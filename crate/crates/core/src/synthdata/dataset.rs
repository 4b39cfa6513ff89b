//! Labelled placement datasets and their on-disk layout.
//!
//! ```text
//! DIR/manifest.txt              options, baseline rate, one `sample=` line per sample
//! DIR/scenes/NNNN.txt           scene layout and rules
//! DIR/samples/NNNN_posK/        bg.png fg.png mask.png comp.png comp_mask.png meta.txt
//! DIR/samples/NNNN_negK/        same
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{gen_scene, oracle, render_fg, uniform_positive_rate, SceneSpec};
use crate::diffcore::Rng;
use crate::error::{Error, Result};
use crate::geometry::{composite, BBox, PlanarTensor, TransformParams};
use crate::imageio::{read_png, write_png};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            other => Err(Error::Config(format!("bad label '{other}'"))),
        }
    }
}

/// A placement with its composite and label.
#[derive(Clone, Debug)]
pub struct AnnotatedSample {
    pub t: TransformParams,
    pub label: Label,
    pub composite: PlanarTensor,
    pub composite_mask: PlanarTensor,
}

/// One scene with its foreground and labelled placements.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub seed: u64,
    pub spec: SceneSpec,
    pub bg: PlanarTensor,
    pub fg: PlanarTensor,
    pub mask: PlanarTensor,
    pub positives: Vec<TransformParams>,
    pub negatives: Vec<TransformParams>,
}

fn draw_until(
    rng: &mut Rng,
    spec: &SceneSpec,
    mask: &PlanarTensor,
    want: bool,
    budget: usize,
) -> Result<TransformParams> {
    for _ in 0..budget {
        let t = TransformParams::new(rng.uniform(), rng.uniform(), rng.uniform());
        if oracle(spec, t, mask) == want {
            return Ok(t);
        }
    }
    Err(Error::SamplingExhausted {
        kind: if want { "positive" } else { "negative" },
        budget,
    })
}

impl SceneRecord {
    /// Builds a scene from its own seed; placements come from rejection
    /// sampling uniform `t` against the oracle.
    pub fn generate(seed: u64, side: usize, positives: usize, negatives: usize, budget: usize) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let (spec, bg) = gen_scene(&mut rng, side);
        let (fg, mask) = render_fg(&mut rng, side);
        let pos = (0..positives)
            .map(|_| draw_until(&mut rng, &spec, &mask, true, budget))
            .collect::<Result<Vec<_>>>()?;
        let neg = (0..negatives)
            .map(|_| draw_until(&mut rng, &spec, &mask, false, budget))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneRecord {
            seed,
            spec,
            bg,
            fg,
            mask,
            positives: pos,
            negatives: neg,
        })
    }

    pub fn sample(&self, t: TransformParams, label: Label) -> Result<AnnotatedSample> {
        let (c, m) = composite(&self.bg, &self.fg, &self.mask, t)?;
        Ok(AnnotatedSample {
            t,
            label,
            composite: c,
            composite_mask: m,
        })
    }

    pub fn samples(&self) -> Result<Vec<AnnotatedSample>> {
        let pos = self.positives.iter().map(|t| self.sample(*t, Label::Positive));
        let neg = self.negatives.iter().map(|t| self.sample(*t, Label::Negative));
        pos.chain(neg).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub seed: u64,
    pub scenes: usize,
    pub positives: usize,
    pub negatives: usize,
    pub side: usize,
    /// Rejection draws allowed per placement.
    pub budget: usize,
    /// Uniform draws per scene for the baseline rate.
    pub baseline_draws: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            seed: 0,
            scenes: 500,
            positives: 2,
            negatives: 4,
            side: 64,
            budget: 10_000,
            baseline_draws: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub options: DatasetOptions,
    pub scenes: Vec<SceneRecord>,
    /// Fraction of uniform random placements the oracle accepts.
    pub baseline_rate: f64,
}

/// Generates `options.scenes` scenes. Scene seeds are drawn in order from the
/// master seed; a scene that exhausts its budget is replaced by the next seed.
pub fn gen_dataset(options: &DatasetOptions) -> Result<Dataset> {
    let mut master = Rng::new(options.seed);
    let mut scenes = Vec::with_capacity(options.scenes);
    let mut failures = 0;
    while scenes.len() < options.scenes {
        let seed = master.next_u64();
        match SceneRecord::generate(seed, options.side, options.positives, options.negatives, options.budget) {
            Ok(s) => scenes.push(s),
            Err(e @ Error::SamplingExhausted { .. }) => {
                failures += 1;
                if failures > 100 + options.scenes {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
    }
    let mut total = 0.0;
    for s in &scenes {
        let mut rng = Rng::derived(s.seed, 1);
        total += uniform_positive_rate(&s.spec, &s.mask, options.baseline_draws, &mut rng);
    }
    let baseline_rate = if scenes.is_empty() { 0.0 } else { total / scenes.len() as f64 };
    Ok(Dataset {
        options: options.clone(),
        scenes,
        baseline_rate,
    })
}

fn sample_dir(scene: usize, label: Label, k: usize) -> String {
    let tag = match label {
        Label::Positive => "pos",
        Label::Negative => "neg",
    };
    format!("{scene:04}_{tag}{k}")
}

fn scene_text(s: &SceneRecord) -> String {
    let sp = &s.spec;
    let mut out = format!(
        "seed={}\nside={}\nfloor_top={}\ns0={}\ns1={}\ntau={}\nsky={},{},{}\nfloor_gb={},{}\n",
        s.seed,
        sp.side,
        sp.floor_top,
        sp.s0,
        sp.s1,
        sp.tau,
        sp.sky[0],
        sp.sky[1],
        sp.sky[2],
        sp.floor_gb[0],
        sp.floor_gb[1]
    );
    for (o, c) in sp.occupiers.iter().zip(&sp.occupier_colors) {
        let _ = writeln!(out, "occupier={},{},{},{},{},{},{}", o.x, o.y, o.w, o.h, c[0], c[1], c[2]);
    }
    out
}

fn parse_err(what: &str, v: &str) -> Error {
    Error::Config(format!("bad {what} value '{v}'"))
}

fn nums<T: std::str::FromStr>(what: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| parse_err(what, v)))
        .collect()
}

fn one<T: std::str::FromStr>(what: &str, v: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| parse_err(what, v))
}

fn parse_scene(text: &str) -> Result<(u64, SceneSpec)> {
    let mut seed = None;
    let mut spec = SceneSpec {
        side: 0,
        floor_top: 0,
        occupiers: vec![],
        occupier_colors: vec![],
        s0: 0.0,
        s1: 0.0,
        tau: 0.0,
        sky: [0; 3],
        floor_gb: [0; 2],
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| parse_err("scene line", line))?;
        match k {
            "seed" => seed = Some(one(k, v)?),
            "side" => spec.side = one(k, v)?,
            "floor_top" => spec.floor_top = one(k, v)?,
            "s0" => spec.s0 = one(k, v)?,
            "s1" => spec.s1 = one(k, v)?,
            "tau" => spec.tau = one(k, v)?,
            "sky" => {
                let c: Vec<u8> = nums(k, v)?;
                spec.sky = c.try_into().map_err(|_| parse_err(k, v))?;
            }
            "floor_gb" => {
                let c: Vec<u8> = nums(k, v)?;
                spec.floor_gb = c.try_into().map_err(|_| parse_err(k, v))?;
            }
            "occupier" => {
                let n: Vec<usize> = nums(k, v)?;
                if n.len() != 7 {
                    return Err(parse_err(k, v));
                }
                spec.occupiers.push(BBox {
                    x: n[0],
                    y: n[1],
                    w: n[2],
                    h: n[3],
                });
                spec.occupier_colors.push([n[4] as u8, n[5] as u8, n[6] as u8]);
            }
            _ => return Err(Error::Config(format!("unknown scene key '{k}'"))),
        }
    }
    let seed = seed.ok_or_else(|| Error::Config("scene without seed".into()))?;
    if !spec.is_valid() {
        return Err(Error::Config(format!("invalid scene {spec:?}")));
    }
    Ok((seed, spec))
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.scenes.iter().map(|s| s.positives.len() + s.negatives.len()).sum()
    }

    pub fn num_positives(&self) -> usize {
        self.scenes.iter().map(|s| s.positives.len()).sum()
    }

    pub fn manifest(&self) -> String {
        let o = &self.options;
        let mut out = format!(
            "seed={}\nscenes={}\npositives={}\nnegatives={}\nside={}\nbudget={}\nbaseline_draws={}\nbaseline_rate={}\n",
            o.seed, o.scenes, o.positives, o.negatives, o.side, o.budget, o.baseline_draws, self.baseline_rate
        );
        for (i, s) in self.scenes.iter().enumerate() {
            let _ = writeln!(out, "scene={i:04} seed={}", s.seed);
            for (label, list) in [(Label::Positive, &s.positives), (Label::Negative, &s.negatives)] {
                for (k, t) in list.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "sample={} scene={i} label={} t={},{},{}",
                        sample_dir(i, label, k),
                        label.name(),
                        t.t_r(),
                        t.t_x(),
                        t.t_y()
                    );
                }
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("scenes"))?;
        fs::create_dir_all(dir.join("samples"))?;
        for (i, s) in self.scenes.iter().enumerate() {
            fs::write(dir.join("scenes").join(format!("{i:04}.txt")), scene_text(s))?;
            for (label, list) in [(Label::Positive, &s.positives), (Label::Negative, &s.negatives)] {
                for (k, t) in list.iter().enumerate() {
                    let d = dir.join("samples").join(sample_dir(i, label, k));
                    fs::create_dir_all(&d)?;
                    let sample = s.sample(*t, label)?;
                    write_png(&d.join("bg.png"), &s.bg)?;
                    write_png(&d.join("fg.png"), &s.fg)?;
                    write_png(&d.join("mask.png"), &s.mask)?;
                    write_png(&d.join("comp.png"), &sample.composite)?;
                    write_png(&d.join("comp_mask.png"), &sample.composite_mask)?;
                    let meta = format!(
                        "t_r={}\nt_x={}\nt_y={}\nlabel={}\nscene={i}\nscene_seed={}\n",
                        t.t_r(),
                        t.t_x(),
                        t.t_y(),
                        label.name(),
                        s.seed
                    );
                    fs::write(d.join("meta.txt"), meta)?;
                }
            }
        }
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`]. Images come from the
    /// first sample of each scene; placements and labels from the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut o = DatasetOptions::default();
        let mut baseline_rate = 0.0;
        let mut placements: Vec<(String, usize, Label, TransformParams)> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("sample=") {
                let mut parts = rest.split(' ');
                let name = parts.next().unwrap_or_default().to_string();
                let mut scene = None;
                let mut label = None;
                let mut t = None;
                for p in parts {
                    let (k, v) = p.split_once('=').ok_or_else(|| parse_err("sample", line))?;
                    match k {
                        "scene" => scene = Some(one::<usize>(k, v)?),
                        "label" => label = Some(Label::parse(v)?),
                        "t" => {
                            let a: Vec<f64> = nums(k, v)?;
                            if a.len() != 3 {
                                return Err(parse_err(k, v));
                            }
                            t = Some(TransformParams::new(a[0], a[1], a[2]));
                        }
                        _ => return Err(parse_err("sample", line)),
                    }
                }
                match (scene, label, t) {
                    (Some(s), Some(l), Some(t)) => placements.push((name, s, l, t)),
                    _ => return Err(parse_err("sample", line)),
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err("manifest line", line))?;
            match k {
                "seed" => o.seed = one(k, v)?,
                "scenes" => o.scenes = one(k, v)?,
                "positives" => o.positives = one(k, v)?,
                "negatives" => o.negatives = one(k, v)?,
                "side" => o.side = one(k, v)?,
                "budget" => o.budget = one(k, v)?,
                "baseline_draws" => o.baseline_draws = one(k, v)?,
                "baseline_rate" => baseline_rate = one(k, v)?,
                "scene" => {}
                _ => return Err(Error::Config(format!("unknown manifest key '{k}'"))),
            }
        }
        let mut scenes = Vec::with_capacity(o.scenes);
        for i in 0..o.scenes {
            let (seed, spec) = parse_scene(&fs::read_to_string(dir.join("scenes").join(format!("{i:04}.txt")))?)?;
            let mine: Vec<_> = placements.iter().filter(|p| p.1 == i).collect();
            let first = mine
                .first()
                .ok_or_else(|| Error::Config(format!("scene {i} has no samples")))?;
            let d = dir.join("samples").join(&first.0);
            let bg = read_png(&d.join("bg.png"), 3)?;
            let fg = read_png(&d.join("fg.png"), 3)?;
            let mask = read_png(&d.join("mask.png"), 1)?;
            if bg.width() != spec.side || !bg.same_size(&fg) || !bg.same_size(&mask) {
                return Err(Error::Config(format!("scene {i}: image size does not match side {}", spec.side)));
            }
            let pick = |l: Label| mine.iter().filter(|p| p.2 == l).map(|p| p.3).collect::<Vec<_>>();
            scenes.push(SceneRecord {
                seed,
                spec,
                bg,
                fg,
                mask,
                positives: pick(Label::Positive),
                negatives: pick(Label::Negative),
            });
        }
        Ok(Dataset {
            options: o,
            scenes,
            baseline_rate,
        })
    }
}
